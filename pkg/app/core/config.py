from __future__ import annotations

from dataclasses import dataclass
from typing import Optional
import logging
import os
import torch
from dotenv import load_dotenv


# Bootstrap env and logging once for core package
load_dotenv()
logging.basicConfig(
    level=os.getenv("DFKD_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger("dfkd_fgvc")

ENV_PREFIX = "DFKD_"


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in {"1", "true", "yes", "on"}


@dataclass
class Config:
    DEVICE: str = os.getenv("DFKD_DEVICE", "cpu")
    LOG_LEVEL: str = os.getenv("DFKD_LOG_LEVEL", "INFO")
    PROGRESS: bool = _flag("DFKD_PROGRESS", "1")
    CACHE_DIR: Optional[str] = os.getenv("DFKD_CACHE_DIR")
    RUN_SLOW: bool = _flag("DFKD_RUN_SLOW", "0")

    # process-level keys that are not experiment settings
    RESERVED_ENV: tuple = ("DFKD_DEVICE", "DFKD_LOG_LEVEL", "DFKD_PROGRESS", "DFKD_CACHE_DIR", "DFKD_RUN_SLOW")

    @property
    def device(self) -> torch.device:
        return torch.device(self.DEVICE)


CFG = Config()
