from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Tuple

import pandas as pd
from tqdm import tqdm

from .checkpoint import save_classifier
from .classifier import build_model, pretrain
from .config import CFG, logger
from .engine import evaluate_checkpoint, run, sample_images
from .errors import ConfigError
from .models import ABLATION_ROWS, Config, RunReport
from .reports import build_workbook, plot_history, save_image_grid, summarize_runs
from .toy_data import LabeledImageSet, cached_fgvc_dataset, split

TEACHER_FILE = "teacher.pt"
SAMPLES_FILE = "samples.png"


def load_splits(cfg: Config) -> Tuple[LabeledImageSet, LabeledImageSet]:
    data = cached_fgvc_dataset(CFG.CACHE_DIR, cfg.dataset_spec())
    return split(data, cfg.train_frac, cfg.data_seed)


def _require_path(value: str | None, key: str) -> Path:
    if not value:
        raise ConfigError(f"missing required path: {key}")
    return Path(value)


def pretrain_logic(cfg: Config) -> Dict[str, Any]:
    out_dir = Path(cfg.out_dir)
    train, test = load_splits(cfg)
    model = build_model(cfg.teacher_spec(), cfg.seed)
    model, history = pretrain(model, train, test, cfg.pretrain_hyperparams(), cfg.seed)

    ckpt = Path(cfg.teacher_ckpt) if cfg.teacher_ckpt else out_dir / TEACHER_FILE
    metrics = {"final_test_accuracy": history.final_accuracy, "train_size": len(train), "test_size": len(test)}
    save_classifier(model, ckpt, seed=cfg.seed, epoch=len(history.train_loss), metrics=metrics)

    frame = pd.DataFrame(
        {
            "epoch": range(1, len(history.train_loss) + 1),
            "train_loss": history.train_loss,
            "test_accuracy": history.test_accuracy,
        }
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / "pretrain_history.csv", index=False)
    if not frame.empty:
        plot_history(frame, out_dir / "history.png", title="teacher pretraining")
    return {"checkpoint": str(ckpt), "test_accuracy": history.final_accuracy}


def distill_logic(cfg: Config, out_dir: Path | None = None) -> RunReport:
    teacher_ckpt = _require_path(cfg.teacher_ckpt, "teacher_ckpt")
    _, test = load_splits(cfg)
    return run(
        teacher_ckpt,
        cfg.student_spec(),
        cfg.hyperparams(),
        test,
        out_dir or Path(cfg.out_dir),
        generator_spec=cfg.generator_spec(),
        embed_dim=cfg.embed_dim,
        resume_from=cfg.resume,
    )


def evaluate_logic(cfg: Config) -> float:
    ckpt = _require_path(cfg.checkpoint or cfg.teacher_ckpt, "checkpoint")
    _, test = load_splits(cfg)
    return evaluate_checkpoint(ckpt, test)


def emit_samples_logic(cfg: Config) -> Path:
    ckpt = _require_path(cfg.checkpoint, "checkpoint")
    n = cfg.samples_grid
    images = sample_images(ckpt, n * n, cfg.seed)
    return save_image_grid(images, Path(cfg.out_dir) / SAMPLES_FILE, nrow=n)


def ablation_grid(cfg: Config) -> List[Tuple[str, Dict[str, Any]]]:
    """(experiment name, Config overrides) for the component rows and the requested sweeps."""
    grid = [(name, {"beta": beta, "gamma": gamma}) for name, (beta, gamma) in ABLATION_ROWS.items()]
    for sweep in cfg.sweeps:
        if sweep == "lambda":
            grid += [(f"lambda={v:g}", {"lam": v}) for v in cfg.sweep_lambdas]
        elif sweep == "order":
            grid += [(f"order={v}", {"order": v}) for v in cfg.sweep_orders]
        elif sweep == "beta":
            grid += [(f"beta={v:g}", {"beta": v, "gamma": 1.0}) for v in cfg.sweep_betas]
        elif sweep == "gamma":
            grid += [(f"gamma={v:g}", {"beta": 10.0, "gamma": v}) for v in cfg.sweep_gammas]
    return grid


def ablate_logic(cfg: Config) -> pd.DataFrame:
    _require_path(cfg.teacher_ckpt, "teacher_ckpt")
    out_dir = Path(cfg.out_dir)
    rows: List[Dict[str, Any]] = []
    jobs = [(name, update, seed) for name, update in ablation_grid(cfg) for seed in cfg.ablate_seeds]
    for name, update, seed in tqdm(jobs, desc="ablate", disable=not CFG.PROGRESS):
        row_cfg = cfg.model_copy(update={**update, "seed": seed, "resume": None})
        run_dir = out_dir / "ablation" / name / f"seed{seed}"
        logger.info(f"Ablation row {name} seed={seed} -> {run_dir}")
        report = distill_logic(row_cfg, out_dir=run_dir)
        rows.append(
            {
                "experiment": name,
                "seed": seed,
                **update,
                "accuracy": report.final_accuracy,
                "best_accuracy": report.best_accuracy,
                "baseline_accuracy": report.baseline_accuracy,
                "teacher_accuracy": report.teacher_accuracy,
            }
        )
    runs = pd.DataFrame(rows)
    summary = summarize_runs(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out_dir / "summary.csv", index=False)
    runs.to_csv(out_dir / "runs.csv", index=False)
    build_workbook({"summary": summary, "runs": runs}, out_dir / "ablation.xlsx", title="DFKD-FGVC ablation")
    return summary
