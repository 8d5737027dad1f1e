"""Synthetic multi-domain classification stream.

All domains share one set of class means. Domain d draws
``x = scale_d * R_d @ (mu_c + eps)`` with ``eps ~ N(0, sigma_d^2 I)`` and a
random rotation ``R_d = expm(angle * A_d)`` (``A_d`` a unit-norm random
skew-symmetric generator), so class semantics persist while the input
distribution shifts from domain to domain.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from kaprompt.errors import ConfigError


@dataclass
class SyntheticDomainSpec:
    index: int
    rotation: np.ndarray
    class_means: np.ndarray
    noise_std: float
    scale: float
    n_train: int
    n_test: int


@dataclass
class DomainData:
    spec: SyntheticDomainSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def random_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=(dim, dim))
    skew = g - g.T
    skew /= np.linalg.norm(skew, 2)
    return expm(angle * skew)


def balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def sample_domain(spec: SyntheticDomainSpec, n: int, rng: np.random.Generator):
    c, dim = spec.class_means.shape
    y = balanced_labels(n, c, rng)
    z = spec.class_means[y] + spec.noise_std * rng.normal(size=(n, dim))
    return spec.scale * z @ spec.rotation.T, y


def generate_stream(config) -> list[DomainData]:
    if config.n_domains < 1 or config.n_classes < 2 or config.input_dim < 1:
        raise ConfigError("generate_stream: need n_domains >= 1, n_classes >= 2, input_dim >= 1")
    # most data first, matching the usual domain ordering by decreasing size
    counts = sorted(config.train_counts, reverse=True)
    rng = np.random.default_rng(config.effective_data_seed)
    means = config.class_mean_scale * rng.normal(size=(config.n_classes, config.input_dim))
    stream = []
    for d in range(config.n_domains):
        drng = np.random.default_rng([config.effective_data_seed, d + 1])
        spec = SyntheticDomainSpec(
            index=d + 1,
            rotation=random_rotation(config.input_dim, config.rotation_angle, drng),
            class_means=means,
            noise_std=float(config.noise_stds[d]),
            scale=float(config.domain_scales[d]),
            n_train=counts[d],
            n_test=config.test_count,
        )
        x_tr, y_tr = sample_domain(spec, spec.n_train, drng)
        x_te, y_te = sample_domain(spec, spec.n_test, drng)
        stream.append(DomainData(spec, x_tr, y_tr, x_te, y_te))
    return stream


def write_stream(stream, out_dir) -> list[Path]:
    """One CSV per domain and split: ``label, x0 .. x{n-1}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for dom in stream:
        for split, x, y in (("train", dom.x_train, dom.y_train), ("test", dom.x_test, dom.y_test)):
            path = out / f"domain_{dom.spec.index}_{split}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["label"] + [f"x{i}" for i in range(x.shape[1])])
                for label, row in zip(y, x):
                    w.writerow([int(label)] + [repr(float(v)) for v in row])
            paths.append(path)
    return paths
