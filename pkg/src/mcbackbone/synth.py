"""Synthetic multi-subject populations from a shared backbone plus
per-subject idiosyncratic arcs.

Structure is drawn on the strictly lower triangle of each scale's adjacency
(acyclic by construction): a shared backbone mask, per-subject idiosyncratic
masks, and per-subject uniform weights.  Panels are solved exactly from the
linear structural model X = C^T X + Z with diagonal Gaussian noise.  Masks
colliding with the backbone count as backbone arcs.  With several scales the
backbone is redrawn independently per scale and panels are synthesized
directly in coefficient space, one block per scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import Backbone
from .dagsolve import MultiscaleDag
from .errors import ConfigError
from .wavelets import MultiscalePanel


@dataclass
class GeneratorConfig:
    subjects: int = 100
    nodes: int = 10
    samples: int = 1200
    scales: int = 1
    backbone_density: float = 0.25
    idio_density: float = 0.5
    weight_low: float = -1.0
    weight_high: float = 1.0
    noise_variances: float | tuple[float, ...] = 1.0
    seed: int = 0
    # optional identifiability floor on |weight|; 0.0 reproduces plain U(low, high)
    min_abs_weight: float = 0.0

    def validate(self):
        if self.subjects < 1 or self.nodes < 1 or self.samples < 1 or self.scales < 1:
            raise ConfigError("subjects, nodes, samples and scales must be >= 1")
        if not (0.0 <= self.backbone_density <= 1.0 and 0.0 <= self.idio_density <= 1.0):
            raise ConfigError("densities must lie in [0, 1]")
        if not self.weight_low < self.weight_high:
            raise ConfigError("weight_low must be < weight_high")
        variances = np.atleast_1d(np.asarray(self.noise_variances, dtype=float))
        if variances.size not in (1, self.nodes) or np.any(variances <= 0):
            raise ConfigError("noise variances must be positive, scalar or per-node")
        if self.min_abs_weight < 0:
            raise ConfigError("min_abs_weight must be non-negative")
        return self

    def noise_std(self) -> np.ndarray:
        variances = np.atleast_1d(np.asarray(self.noise_variances, dtype=float))
        if variances.size == 1:
            variances = np.full(self.nodes, variances[0])
        return np.sqrt(variances)


@dataclass
class GroundTruthPopulation:
    backbone: Backbone
    dags: list[MultiscaleDag]
    panels: list[MultiscalePanel]
    config: GeneratorConfig = field(default_factory=GeneratorConfig)


def sample_sem_panel(weights: np.ndarray, noise_std: np.ndarray, n_samples: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw a K x N panel from X = C^T X + Z, solved exactly.

    ``weights`` must have acyclic support so that I - C^T is invertible.
    """
    weights = np.asarray(weights, dtype=float)
    k = weights.shape[0]
    noise = rng.normal(size=(k, n_samples)) * np.asarray(noise_std)[:, None]
    return np.linalg.solve(np.eye(k) - weights.T, noise)


def sem_covariance(weights: np.ndarray, noise_variances: np.ndarray) -> np.ndarray:
    """Closed-form covariance (I - C^T)^-1 Sigma (I - C)^-1 of the model."""
    weights = np.asarray(weights, dtype=float)
    k = weights.shape[0]
    inv = np.linalg.inv(np.eye(k) - weights.T)
    return inv @ np.diag(np.asarray(noise_variances, dtype=float)) @ inv.T


def _strict_lower_mask(rng: np.random.Generator, k: int, density: float) -> np.ndarray:
    mask = rng.random((k, k)) < density
    return np.tril(mask, k=-1)


def _draw_weights(rng: np.random.Generator, cfg: GeneratorConfig, k: int) -> np.ndarray:
    w = rng.uniform(cfg.weight_low, cfg.weight_high, size=(k, k))
    if cfg.min_abs_weight > 0:
        for _ in range(1000):
            small = np.abs(w) < cfg.min_abs_weight
            if not small.any():
                break
            w[small] = rng.uniform(cfg.weight_low, cfg.weight_high, size=int(small.sum()))
    return w


def generate_population(cfg: GeneratorConfig) -> GroundTruthPopulation:
    """Generate backbone, per-subject DAGs and panels; deterministic per seed."""
    cfg.validate()
    k, j, s = cfg.nodes, cfg.scales, cfg.subjects
    root = np.random.SeedSequence(cfg.seed)
    backbone_ss, subject_ss = root.spawn(2)
    backbone_rng = np.random.default_rng(backbone_ss)

    backbone_masks = [_strict_lower_mask(backbone_rng, k, cfg.backbone_density)
                      for _ in range(j)]
    backbone_arcs = {
        (scale, int(l), int(m))
        for scale, mask in enumerate(backbone_masks)
        for l, m in zip(*np.nonzero(mask))
    }

    noise_std = cfg.noise_std()
    dags, panels = [], []
    for sid, ss in enumerate(subject_ss.spawn(s)):
        rng = np.random.default_rng(ss)
        layers, blocks = [], []
        for scale in range(j):
            idio = _strict_lower_mask(rng, k, cfg.idio_density)
            mask = backbone_masks[scale] | idio
            weights = _draw_weights(rng, cfg, k) * mask
            layers.append(weights)
            blocks.append(sample_sem_panel(weights, noise_std, cfg.samples, rng))
        name = f"subject_{sid:03d}"
        dags.append(MultiscaleDag(layers, subject_id=name))
        panels.append(MultiscalePanel(blocks, subject_id=name))

    backbone = Backbone(arcs=backbone_arcs, persistence_p=-1,
                        n_nodes=k, n_scales=j)
    return GroundTruthPopulation(backbone, dags, panels, replace(cfg))


def generate_repeat_acquisition(pop: GroundTruthPopulation, seed2: int) -> list[MultiscalePanel]:
    """Second panel set from the same per-subject DAGs with fresh noise."""
    cfg = pop.config
    noise_std = cfg.noise_std()
    root = np.random.SeedSequence(seed2)
    panels = []
    for dag, ss in zip(pop.dags, root.spawn(len(pop.dags))):
        rng = np.random.default_rng(ss)
        blocks = [sample_sem_panel(layer, noise_std, cfg.samples, rng)
                  for layer in dag.layers]
        panels.append(MultiscalePanel(blocks, subject_id=dag.subject_id))
    return panels
