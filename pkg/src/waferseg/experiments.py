"""Small-scale ablation protocol on seeded synthetic wafers.

Each run generates a fixed train/val set from a master seed, trains one
model and reports validation metrics. The helpers here back the ``ablate``
subcommand and the directional trend checks in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .evaluation import MetricsReport, evaluate
from .model import ModelConfig, build_model
from .pipeline import PreparedSample, preprocess
from .training import TrainConfig, train
from .wafergen import WaferGenConfig, generate_dataset

UNIFORM_WEIGHTS = (100.0, 100.0, 100.0)
DEFECT_WEIGHTS = (100.0, 100.0, 2000.0)


@dataclass(frozen=True)
class Protocol:
    """Dataset and schedule shared by every run of a trend comparison."""

    size: int = 64
    n_train: int = 24
    n_val: int = 8
    cluster_fraction: float = 0.25
    epochs: int = 12
    lr0: float = 0.0008
    generator: dict = field(default_factory=dict)

    def wafer_template(self, **overrides) -> WaferGenConfig:
        return WaferGenConfig(height=self.size, width=self.size, **{**self.generator, **overrides})


def protocol_dataset(protocol: Protocol, seed: int, **generator_overrides):
    """Prepared (train, val) lists for one seed."""
    samples, manifest = generate_dataset(
        protocol.wafer_template(**generator_overrides),
        protocol.n_train + protocol.n_val,
        protocol.cluster_fraction,
        seed,
        split=(protocol.n_train, protocol.n_val),
    )
    train_set: list[PreparedSample] = []
    val_set: list[PreparedSample] = []
    for sample, entry in zip(samples, manifest["samples"]):
        sample.meta["name"] = entry["name"]
        (val_set if entry["split"] == "val" else train_set).append(preprocess(sample))
    return train_set, val_set


def protocol_run(
    protocol: Protocol,
    seed: int,
    model_config: ModelConfig | None = None,
    class_weights=DEFECT_WEIGHTS,
    data=None,
    **generator_overrides,
) -> MetricsReport:
    """Train on the seed's train split and return pooled validation metrics."""
    train_set, val_set = data if data is not None else protocol_dataset(protocol, seed, **generator_overrides)
    model = build_model(model_config or ModelConfig(), seed=seed)
    config = TrainConfig(epochs=protocol.epochs, lr0=protocol.lr0, class_weights=tuple(class_weights),
                         seed=seed, eval_every=0)
    train(model, train_set, None, config)
    return evaluate(model, val_set).report


def with_epochs(protocol: Protocol, epochs: int) -> Protocol:
    return replace(protocol, epochs=epochs)
