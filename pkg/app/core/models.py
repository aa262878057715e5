from __future__ import annotations

from typing import Any, Dict, List, Optional, Tuple
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_list(value: Any) -> Any:
    # flat config files and env vars carry lists as "64,128,256"
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


# Data
class DatasetSpec(BaseModel):
    num_super: int = Field(default=2, ge=1)
    subs_per_super: int = Field(default=5, ge=1)
    samples_per_class: int = Field(default=100, ge=1)
    image_size: int = Field(default=32, ge=16)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _multiple_of_8(cls, v: int) -> int:
        if v % 8:
            raise ValueError(f"image_size must be a multiple of 8, got {v}")
        return v

    @property
    def num_classes(self) -> int:
        return self.num_super * self.subs_per_super


# Networks
class ConvNetSpec(BaseModel):
    stage_channels: List[int] = Field(default_factory=lambda: [64, 128, 256])
    blocks_per_stage: int = Field(default=2, ge=1)
    num_classes: int = Field(default=10, ge=2)
    input_size: int = Field(default=32, ge=8)

    @field_validator("stage_channels")
    @classmethod
    def _three_stages(cls, v: List[int]) -> List[int]:
        if len(v) != 3 or any(c < 1 for c in v):
            raise ValueError(f"stage_channels must list 3 positive channel counts, got {v}")
        return v

    @field_validator("input_size")
    @classmethod
    def _divisible(cls, v: int) -> int:
        if v % 8:
            raise ValueError(f"input_size must be divisible by 2^3, got {v}")
        return v

    @property
    def num_bn_layers(self) -> int:
        return 1 + 3 * self.blocks_per_stage


class GeneratorSpec(BaseModel):
    z_dim: int = Field(default=256, ge=1)
    base_channels: int = Field(default=512, ge=8)
    out_size: int = Field(default=32, ge=16)
    sam_ratio: int = Field(default=8, ge=1)
    lam: float = Field(default=5e-2, ge=0.0)
    attention: bool = True

    @property
    def grid_size(self) -> int:
        return self.out_size // 16

    @property
    def block_channels(self) -> List[int]:
        """Output channels of the four upsampling blocks (512 -> 256, 128, 64, 64)."""
        b = self.base_channels
        return [b // 2, b // 4, b // 8, b // 8]

    @model_validator(mode="after")
    def _check_chain(self) -> "GeneratorSpec":
        if self.out_size % 16:
            raise ValueError(f"out_size must be 2^4 x grid size, got {self.out_size}")
        if self.base_channels % 8:
            raise ValueError(f"base_channels must be divisible by 8, got {self.base_channels}")
        for c in self.block_channels:
            if c % self.sam_ratio:
                raise ValueError(f"sam_ratio {self.sam_ratio} does not divide block channels {c}")
        return self


# Training
class Hyperparams(BaseModel):
    alpha: float = Field(default=0.3, ge=0.0)
    beta: float = Field(default=10.0, ge=0.0)
    gamma: float = Field(default=8.0, ge=0.0)
    lam: float = Field(default=5e-2, ge=0.0)
    tau: float = Field(default=0.07, gt=0.0)
    order: int = Field(default=3, ge=1, le=3)
    gen_steps: int = Field(default=20, ge=0)
    student_steps: int = Field(default=15, ge=0)
    batch_size: int = Field(default=64, ge=1)
    lr_g: float = Field(default=1e-3, gt=0.0)
    betas_g: Tuple[float, float] = (0.5, 0.99)
    lr_s: float = Field(default=1e-2, gt=0.0)
    momentum_s: float = Field(default=0.9, ge=0.0)
    weight_decay_s: float = Field(default=5e-4, ge=0.0)
    epochs: int = Field(default=200, ge=0)
    seed: int = 0


class EpochRecord(BaseModel):
    epoch: int
    l_kd: float
    l_bn: float
    l_mhad: float
    l_sfcl: float
    gen_obj: float
    stu_obj: float
    accuracy: float = Field(ge=0.0, le=1.0)
    seconds: float
    lr: Optional[float] = None


class RunReport(BaseModel):
    records: List[EpochRecord] = Field(default_factory=list)
    seed: int
    baseline_accuracy: Optional[float] = None
    teacher_accuracy: Optional[float] = None
    best_accuracy: Optional[float] = None
    wall_clock: float = 0.0
    best_checkpoint: Optional[str] = None
    last_checkpoint: Optional[str] = None
    metrics_csv: Optional[str] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    aborted: bool = False

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.records[-1].accuracy if self.records else None


class PretrainHistory(BaseModel):
    train_loss: List[float] = Field(default_factory=list)
    test_accuracy: List[float] = Field(default_factory=list)

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.test_accuracy[-1] if self.test_accuracy else None


# CLI configuration
ABLATION_ROWS: Dict[str, Tuple[float, float]] = {
    "kd_only": (0.0, 0.0),
    "+sfcl": (0.0, 8.0),
    "+mhad": (10.0, 0.0),
    "+mhad+sfcl": (10.0, 8.0),
}
SWEEP_NAMES = ("lambda", "order", "beta", "gamma")


class Config(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Hyperparams
    alpha: float = Field(default=0.3, ge=0.0)
    beta: float = Field(default=10.0, ge=0.0)
    gamma: float = Field(default=8.0, ge=0.0)
    lam: float = Field(default=5e-2, ge=0.0)
    tau: float = Field(default=0.07, gt=0.0)
    order: int = Field(default=3, ge=1, le=3)
    gen_steps: int = Field(default=20, ge=1)
    student_steps: int = Field(default=15, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr_g: float = Field(default=1e-3, gt=0.0)
    beta1_g: float = Field(default=0.5, ge=0.0, lt=1.0)
    beta2_g: float = Field(default=0.99, ge=0.0, lt=1.0)
    lr_s: float = Field(default=1e-2, gt=0.0)
    momentum_s: float = Field(default=0.9, ge=0.0)
    weight_decay_s: float = Field(default=5e-4, ge=0.0)
    epochs: int = Field(default=200, ge=1)
    seed: int = 0

    # Toy dataset
    num_super: int = Field(default=2, ge=1)
    subs_per_super: int = Field(default=5, ge=1)
    samples_per_class: int = Field(default=100, ge=2)
    image_size: int = Field(default=32, ge=16)
    data_seed: int = 0
    train_frac: float = Field(default=0.8, gt=0.0, lt=1.0)

    # Networks
    teacher_channels: List[int] = Field(default_factory=lambda: [64, 128, 256])
    teacher_blocks: int = Field(default=2, ge=1)
    student_channels: List[int] = Field(default_factory=lambda: [32, 64, 128])
    student_blocks: int = Field(default=1, ge=1)
    z_dim: int = Field(default=256, ge=1)
    base_channels: int = Field(default=512, ge=8)
    sam_ratio: int = Field(default=8, ge=1)
    embed_dim: int = Field(default=128, ge=1)

    # Teacher pretraining
    pretrain_epochs: int = Field(default=60, ge=0)
    pretrain_lr: float = Field(default=0.05, gt=0.0)
    pretrain_batch_size: int = Field(default=64, ge=1)

    # Paths and artifacts
    out_dir: str = "runs"
    teacher_ckpt: Optional[str] = None
    checkpoint: Optional[str] = None
    resume: Optional[str] = None
    samples_grid: int = Field(default=8, ge=1)

    # Ablation and sweeps
    ablate_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    sweeps: List[str] = Field(default_factory=list)
    sweep_lambdas: List[float] = Field(default_factory=lambda: [0.0, 1e-2, 5e-2, 7e-2, 9e-2])
    sweep_orders: List[int] = Field(default_factory=lambda: [1, 2, 3])
    sweep_betas: List[float] = Field(default_factory=lambda: [0.0, 1.0, 10.0, 100.0])
    sweep_gammas: List[float] = Field(default_factory=lambda: [0.0, 1.0, 8.0, 100.0])

    @field_validator(
        "teacher_channels",
        "student_channels",
        "ablate_seeds",
        "sweeps",
        "sweep_lambdas",
        "sweep_orders",
        "sweep_betas",
        "sweep_gammas",
        mode="before",
    )
    @classmethod
    def split_lists(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("sweeps")
    @classmethod
    def _known_sweeps(cls, v: List[str]) -> List[str]:
        for name in v:
            if name not in SWEEP_NAMES:
                raise ValueError(f"unknown sweep {name!r}; choose from {', '.join(SWEEP_NAMES)}")
        return v

    @field_validator("image_size")
    @classmethod
    def _generator_size(cls, v: int) -> int:
        if v % 16:
            raise ValueError(f"image_size must be a multiple of 16 for the 4-block generator, got {v}")
        return v

    @model_validator(mode="after")
    def _check_specs(self) -> "Config":
        # surface spec errors at parse time, before any compute
        self.dataset_spec()
        self.teacher_spec()
        self.student_spec()
        self.generator_spec()
        return self

    @property
    def num_classes(self) -> int:
        return self.num_super * self.subs_per_super

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            num_super=self.num_super,
            subs_per_super=self.subs_per_super,
            samples_per_class=self.samples_per_class,
            image_size=self.image_size,
            seed=self.data_seed,
        )

    def teacher_spec(self) -> ConvNetSpec:
        return ConvNetSpec(
            stage_channels=self.teacher_channels,
            blocks_per_stage=self.teacher_blocks,
            num_classes=self.num_classes,
            input_size=self.image_size,
        )

    def student_spec(self) -> ConvNetSpec:
        return ConvNetSpec(
            stage_channels=self.student_channels,
            blocks_per_stage=self.student_blocks,
            num_classes=self.num_classes,
            input_size=self.image_size,
        )

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            z_dim=self.z_dim,
            base_channels=self.base_channels,
            out_size=self.image_size,
            sam_ratio=self.sam_ratio,
            lam=self.lam,
        )

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            lam=self.lam,
            tau=self.tau,
            order=self.order,
            gen_steps=self.gen_steps,
            student_steps=self.student_steps,
            batch_size=self.batch_size,
            lr_g=self.lr_g,
            betas_g=(self.beta1_g, self.beta2_g),
            lr_s=self.lr_s,
            momentum_s=self.momentum_s,
            weight_decay_s=self.weight_decay_s,
            epochs=self.epochs,
            seed=self.seed,
        )

    def pretrain_hyperparams(self) -> Hyperparams:
        return self.hyperparams().model_copy(
            update={
                "epochs": self.pretrain_epochs,
                "lr_s": self.pretrain_lr,
                "batch_size": self.pretrain_batch_size,
            }
        )
