"""MNIST-1K protocol shared by the experiment script and the acceptance suite.

Three valid conv layers (2x2, 3x3, 3x3) with the same channel count, trained
on a class-balanced 1000-image subset and scored on the full 10k test set.
Every variant gets identical hyperparameters; the seed drives the subset,
the initialization and the shuffling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from . import data as dio
from .features import ConvSpec, InitSchedule, NetworkArchitecture, Variant
from .training import TrainConfig, TrainResult, train

IDX_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass(frozen=True)
class Mnist1KSetup:
    channels: int = 16
    sigmas: tuple = (1.0, 0.5, 0.5)
    epochs: int = 30
    learning_rate: float = 0.05
    adam_learning_rate: float = 1e-3
    lambda1: float = 1e-4
    lambda2: float = 1e-6
    batch_size: int = 32
    train_size: int = 1000
    dtype: str = "float32"
    filters: tuple = field(default=((2, 2), (3, 3), (3, 3)))

    def architecture(self, variant) -> NetworkArchitecture:
        layers = tuple(ConvSpec(self.channels, k) for k in self.filters)
        return NetworkArchitecture((28, 28, 1), layers, Variant(variant), 10)

    def train_config(self, variant, seed: int) -> TrainConfig:
        return TrainConfig(lambda1=self.lambda1, lambda2=self.lambda2, learning_rate=self.learning_rate,
                           adam_learning_rate=self.adam_learning_rate, batch_size=self.batch_size,
                           epochs=self.epochs, seed=seed, freeze_features=Variant(variant) is Variant.CDSK,
                           dtype=self.dtype, eval_every=self.epochs)


def load_mnist(data_dir) -> tuple[dio.Dataset, dio.Dataset]:
    d = Path(data_dir)
    train_set = dio.load_idx(d / IDX_FILES[0], d / IDX_FILES[1])
    test_set = dio.load_idx(d / IDX_FILES[2], d / IDX_FILES[3])
    return train_set, test_set


@dataclass
class Mnist1KRun:
    variant: str
    seed: int
    subset: dio.Dataset
    schedule: InitSchedule
    result: TrainResult
    seconds: float

    @property
    def test_accuracy(self) -> float:
        return self.result.metrics[-1].test_accuracy


def run_mnist_1k(variant, seed: int, full_train: dio.Dataset, test: dio.Dataset,
                 setup: Mnist1KSetup = Mnist1KSetup()) -> Mnist1KRun:
    t0 = time.perf_counter()
    subset = dio.subsample(full_train, setup.train_size, seed, stratified=True, balanced=True)
    schedule = InitSchedule(tuple(setup.sigmas), seed)
    res = train(subset, setup.architecture(variant), schedule, setup.train_config(variant, seed),
                eval_dataset=test)
    return Mnist1KRun(str(variant), seed, subset, schedule, res, time.perf_counter() - t0)
