#!/usr/bin/env python3
"""
Training progress bookkeeping
Loss history, periodic progress lines and window statistics for both trainers
"""

import logging
import math
import time
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)


class TrainingMonitor:
    """Records losses and validation metrics of one training run"""

    def __init__(self, name: str, log_every: int = 100, window: int = 50):
        self.name = name
        self.log_every = max(1, int(log_every))
        self.window = max(1, int(window))
        self.losses: List[float] = []
        self.validation: List[Dict[str, float]] = []
        self.started = time.perf_counter()

    def record_step(self, step: int, loss: float) -> None:
        self.losses.append(float(loss))
        if step % self.log_every == 0:
            logger.info(f"{self.name} step={step} loss={loss:.6f}")

    def record_validation(self, step: int, mrr: float) -> None:
        self.validation.append({"step": step, "mrr": float(mrr)})
        logger.info(f"{self.name} step={step} mrr={mrr:.6f}")

    def recent(self, count: int = 5) -> List[float]:
        return self.losses[-count:]

    def window_means(self) -> List[float]:
        """Mean loss of consecutive non-overlapping windows"""
        return [
            sum(self.losses[i:i + self.window]) / len(self.losses[i:i + self.window])
            for i in range(0, len(self.losses) - self.window + 1, self.window)
        ]

    def get_training_report(self) -> Dict[str, Any]:
        finite = [loss for loss in self.losses if math.isfinite(loss)]
        return {
            "name": self.name,
            "steps": len(self.losses),
            "first_loss": finite[0] if finite else None,
            "final_loss": finite[-1] if finite else None,
            "best_loss": min(finite) if finite else None,
            "window": self.window,
            "window_means": self.window_means(),
            "validation": list(self.validation),
            "seconds": round(time.perf_counter() - self.started, 3),
        }


def monitor_or_default(monitor: Optional[TrainingMonitor], name: str, log_every: int) -> TrainingMonitor:
    return monitor if monitor is not None else TrainingMonitor(name, log_every=log_every)
