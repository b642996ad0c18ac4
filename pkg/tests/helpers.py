"""Shared oracles and fixtures for the test suite."""

from __future__ import annotations

import itertools

import numpy as np
import torch

from sslwb.dataset import SyntheticCorpusSpec, render_sample
from sslwb.engine.train import ImageData


def central_difference(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of scalar f at x, evaluated in float64."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat, g = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def autograd_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    f(x).backward()
    return x.grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    den = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / den


def brute_force_kmeans(x: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """Minimum WCSS over every labelling that uses all k clusters."""
    best, best_labels = np.inf, None
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels.tolist())) != k:
            continue
        cost = sum(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum() for j in range(k))
        if cost < best - 1e-12:
            best, best_labels = cost, labels
    return float(best), best_labels


def wcss(x: np.ndarray, labels: np.ndarray, k: int) -> float:
    return float(sum(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum() for j in range(k) if np.any(labels == j)))


def synthetic_data(num_classes: int = 4, per_class: int = 12, seed: int = 0, size: int = 32) -> ImageData:
    spec = SyntheticCorpusSpec.uniform(num_classes, per_class, seed=seed, image_size=size)
    images = np.stack([render_sample(spec, c, i) for c in range(num_classes) for i in range(per_class)])
    labels = np.repeat(np.arange(num_classes), per_class)
    return ImageData.from_arrays(images, labels, [f"class{c}" for c in range(num_classes)])
