"""Similarity-term ablation on synthetic or loaded videos."""
from __future__ import annotations

import dataclasses
import statistics
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .dataio import SynthConfig, VideoSequence, synth_dataset
from .evaluation import EvalReport, evaluate
from .trainer import EpochStats, TrainConfig, new_model, prepare, train_epoch

# finetune-time overrides per variant
VARIANTS = {
    "full": {"similarity": "intensity"},
    "ones": {"similarity": "ones"},
    "no_lst": {"lam": 0.0},
}


@dataclass
class AblationResult:
    # variant -> seed -> (mae, mse)
    scores: dict[str, dict[int, tuple[float, float]]] = field(default_factory=dict)

    def median_mae(self, variant: str) -> float:
        return statistics.median(m for m, _ in self.scores[variant].values())

    def median_mse(self, variant: str) -> float:
        return statistics.median(s for _, s in self.scores[variant].values())


def run_ablation(train_videos: Sequence[VideoSequence], test_videos: Sequence[VideoSequence],
                 config: TrainConfig, seeds: Sequence[int], variants: Sequence[str] = ("full", "ones"),
                 on_epoch: Callable[[str, int, EpochStats], None] | None = None) -> AblationResult:
    """Pretrain once per seed, then finetune and evaluate each variant from that snapshot.

    Sharing the pretrained weights isolates the effect of the finetune
    objective from pretraining noise.
    """
    config.validate()
    clips = prepare(train_videos, config)
    result = AblationResult({v: {} for v in variants})
    for seed in seeds:
        base_cfg = dataclasses.replace(config, seed=seed)
        model = new_model(base_cfg)
        for epoch in range(1, config.pretrain_epochs + 1):
            stats = train_epoch(model, clips, base_cfg, "pretrain", epoch)
            if on_epoch:
                on_epoch("pretrain", seed, stats)
        for variant in variants:
            cfg = dataclasses.replace(base_cfg, **VARIANTS[variant])
            m = model.clone()
            for epoch in range(config.pretrain_epochs + 1, config.pretrain_epochs + config.finetune_epochs + 1):
                stats = train_epoch(m, clips, cfg, "finetune", epoch)
                if on_epoch:
                    on_epoch(variant, seed, stats)
            report: EvalReport = evaluate(m, test_videos, sigma=cfg.sigma)
            result.scores[variant][seed] = (report.mae, report.mse)
    return result


def benchmark(seed: int = 7, n_train: int = 20, n_test: int = 10, frames: int = 40,
              height: int = 64, width: int = 96) -> tuple[list[VideoSequence], list[VideoSequence]]:
    """Fixed synthetic train/test split used by the ablation check."""
    base = SynthConfig(frames=frames, height=height, width=width)
    videos = synth_dataset(n_train + n_test, base, seed=seed)
    return videos[:n_train], videos[n_train:]
