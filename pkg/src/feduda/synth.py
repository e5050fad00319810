"""Synthetic domain-shifted identity data.

Every domain shares one canonical generative model: identity centers live in
a low-rank "identity" subspace, and samples scatter around their center with
small noise inside that subspace and (optionally larger) nuisance noise
outside it.  A domain is the canonical model pushed through its own
orthogonal transform and translation, so all domains share the task but not
the marginal distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm

__all__ = [
    "DomainSpec",
    "Sample",
    "LabeledDataset",
    "EvalSplit",
    "domain_transform",
    "generate_domain",
    "partition_clients",
    "genuine_pairs",
    "build_eval_split",
    "split_train_eval",
    "concat_datasets",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of one synthetic domain.

    ``identity_rank`` limits identity variation to the first ``identity_rank``
    canonical axes (``None`` means all axes).  ``nuisance_sigma`` is the noise
    std on the remaining axes and defaults to ``intra_noise_sigma``.
    ``rotation_strength`` is the largest principal angle (radians) of the
    domain rotation; 0 gives the identity transform.  ``impurity_fraction`` of the
    identities are emitted untransformed (out-of-domain identities).
    """

    name: str
    num_identities: int
    samples_per_identity: int
    input_dim: int
    identity_mean_scale: float = 1.0
    intra_noise_sigma: float = 0.3
    shift_offset: tuple[float, ...] | None = None
    shift_rotation_seed: int = 0
    identity_rank: int | None = None
    nuisance_sigma: float | None = None
    rotation_strength: float = 1.0
    impurity_fraction: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.name or any(c in self.name for c in ", \t\n"):
            raise ValueError(f"name: must be non-empty without commas/whitespace, got {self.name!r}")
        if self.num_identities < 1:
            raise ValueError(f"num_identities: must be >= 1, got {self.num_identities}")
        if self.samples_per_identity < 2:
            raise ValueError(f"samples_per_identity: must be >= 2, got {self.samples_per_identity}")
        if self.input_dim < 2:
            raise ValueError(f"input_dim: must be >= 2, got {self.input_dim}")
        if not self.intra_noise_sigma > 0:
            raise ValueError(f"intra_noise_sigma: must be > 0, got {self.intra_noise_sigma}")
        if not self.identity_mean_scale > 0:
            raise ValueError(f"identity_mean_scale: must be > 0, got {self.identity_mean_scale}")
        if self.shift_offset is not None and len(self.shift_offset) != self.input_dim:
            raise ValueError(
                f"shift_offset: length {len(self.shift_offset)} != input_dim {self.input_dim}"
            )
        if self.identity_rank is not None and not 1 <= self.identity_rank <= self.input_dim:
            raise ValueError(f"identity_rank: must be in [1, input_dim], got {self.identity_rank}")
        if self.nuisance_sigma is not None and not self.nuisance_sigma > 0:
            raise ValueError(f"nuisance_sigma: must be > 0, got {self.nuisance_sigma}")
        if not 0.0 <= self.impurity_fraction < 1.0:
            raise ValueError(f"impurity_fraction: must be in [0, 1), got {self.impurity_fraction}")

    @property
    def offset(self) -> np.ndarray:
        if self.shift_offset is None:
            return np.zeros(self.input_dim)
        return np.asarray(self.shift_offset, dtype=np.float64)


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    identity: int
    domain: str


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix with one identity label per row.

    ``label_origin[k]`` is the identity label that local label ``k`` carried
    in the dataset this one was derived from (identity map for fresh data).
    """

    features: np.ndarray
    identities: np.ndarray
    domain: str
    num_identities: int
    label_origin: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        ids = np.asarray(self.identities, dtype=np.int64)
        if feats.ndim != 2 or ids.shape != (feats.shape[0],):
            raise ValueError(f"features {feats.shape} and identities {ids.shape} do not align")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite entries")
        if len(ids) and (ids.min() < 0 or ids.max() >= self.num_identities):
            raise ValueError("identity labels outside [0, num_identities)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "identities", ids)
        if self.label_origin is None:
            object.__setattr__(self, "label_origin", np.arange(self.num_identities))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(self.features[i], int(self.identities[i]), self.domain) for i in range(len(self))]

    def subset(self, index) -> "LabeledDataset":
        """Rows ``index``, labels untouched."""
        index = np.asarray(index, dtype=np.int64)
        return replace(self, features=self.features[index], identities=self.identities[index])

    def relabel(self) -> "LabeledDataset":
        """Re-index present labels to ``[0, count)`` in increasing label order."""
        present, local = np.unique(self.identities, return_inverse=True)
        return LabeledDataset(
            self.features, local, self.domain, len(present), label_origin=self.label_origin[present]
        )

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.domain == other.domain
            and self.num_identities == other.num_identities
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.identities, other.identities)
        )


@dataclass(frozen=True, eq=False)
class EvalSplit:
    """Verification pairs plus an identification query/gallery split.

    All indices refer to rows of ``dataset``.
    """

    dataset: LabeledDataset
    pairs: np.ndarray
    genuine: np.ndarray
    query_idx: np.ndarray
    gallery_idx: np.ndarray

    @property
    def query(self) -> LabeledDataset:
        return self.dataset.subset(self.query_idx)

    @property
    def gallery(self) -> LabeledDataset:
        return self.dataset.subset(self.gallery_idx)

    @property
    def test_pairs(self) -> list[tuple[int, int, bool]]:
        return [(int(i), int(j), bool(g)) for (i, j), g in zip(self.pairs, self.genuine)]


def domain_transform(spec: DomainSpec) -> np.ndarray:
    """Orthogonal ``expm(strength * S)``; ``S`` is seeded skew-symmetric with
    unit spectral norm, so ``strength`` bounds every rotation angle."""
    rng = np.random.default_rng(spec.shift_rotation_seed)
    g = rng.standard_normal((spec.input_dim, spec.input_dim))
    skew = g - g.T
    skew /= np.linalg.norm(skew, 2)
    q = expm(spec.rotation_strength * skew)
    # expm of a skew matrix is orthogonal up to rounding; tidy with QR
    q, r = np.linalg.qr(q)
    return q * np.sign(np.diag(r))


def generate_domain(spec: DomainSpec, seed: int) -> LabeledDataset:
    """Draw ``num_identities * samples_per_identity`` samples, identity-major order."""
    spec.validate()
    rng = np.random.default_rng(seed)
    dim = spec.input_dim
    rank = dim if spec.identity_rank is None else spec.identity_rank
    nuisance = spec.intra_noise_sigma if spec.nuisance_sigma is None else spec.nuisance_sigma

    centers = np.zeros((spec.num_identities, dim))
    centers[:, :rank] = spec.identity_mean_scale * rng.standard_normal((spec.num_identities, rank))
    sigma = np.full(dim, nuisance)
    sigma[:rank] = spec.intra_noise_sigma

    n = spec.num_identities * spec.samples_per_identity
    labels = np.repeat(np.arange(spec.num_identities), spec.samples_per_identity)
    canonical = centers[labels] + rng.standard_normal((n, dim)) * sigma

    q = domain_transform(spec)
    feats = canonical @ q.T + spec.offset
    n_impure = int(round(spec.impurity_fraction * spec.num_identities))
    if n_impure:
        impure = rng.choice(spec.num_identities, size=n_impure, replace=False)
        mask = np.isin(labels, impure)
        feats[mask] = canonical[mask]
    return LabeledDataset(feats, labels, spec.name, spec.num_identities)


def partition_clients(dataset: LabeledDataset, K: int) -> list[LabeledDataset]:
    """Split identities evenly (sizes differ by at most one) across ``K`` clients."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > dataset.num_identities:
        raise ValueError(f"K={K} exceeds num_identities={dataset.num_identities}")
    out = []
    for chunk in np.array_split(np.arange(dataset.num_identities), K):
        rows = np.flatnonzero(np.isin(dataset.identities, chunk))
        local = np.searchsorted(chunk, dataset.identities[rows])
        out.append(
            LabeledDataset(
                dataset.features[rows],
                local,
                dataset.domain,
                len(chunk),
                label_origin=dataset.label_origin[chunk],
            )
        )
    return out


def genuine_pairs(identities) -> np.ndarray:
    """All index pairs ``(i, j)``, ``i < j``, sharing an identity."""
    identities = np.asarray(identities)
    i, j = np.triu_indices(len(identities), k=1)
    same = identities[i] == identities[j]
    return np.stack([i[same], j[same]], axis=1)


def build_eval_split(dataset: LabeledDataset, holdout_fraction: float = 1.0, seed: int = 0) -> EvalSplit:
    """Hold out identities and build verification pairs and a query/gallery split.

    Genuine pairs are exhaustive; impostor pairs are drawn without replacement
    in equal number (or all of them, if fewer exist).
    """
    if not 0.0 < holdout_fraction <= 1.0:
        raise ValueError(f"holdout_fraction must be in (0, 1], got {holdout_fraction}")
    rng = np.random.default_rng(seed)
    n_hold = max(1, int(round(holdout_fraction * dataset.num_identities)))
    held = np.sort(rng.permutation(dataset.num_identities)[:n_hold])
    rows = np.flatnonzero(np.isin(dataset.identities, held))
    held_ds = dataset.subset(rows)

    counts = np.bincount(held_ds.identities, minlength=dataset.num_identities)[held]
    if np.any(counts < 2):
        bad = held[counts < 2]
        raise ValueError(f"held-out identities with fewer than 2 samples: {bad.tolist()}")
    if len(held) < 2:
        raise ValueError("need at least 2 held-out identities to form impostor pairs")

    ids = held_ds.identities
    query = []
    for ident in held:
        members = np.flatnonzero(ids == ident)
        query.append(members[rng.integers(len(members))])
    query_idx = np.array(query, dtype=np.int64)
    gallery_idx = np.setdiff1d(np.arange(len(held_ds)), query_idx)

    gen = genuine_pairs(ids)
    i, j = np.triu_indices(len(ids), k=1)
    diff = ids[i] != ids[j]
    imp_all = np.stack([i[diff], j[diff]], axis=1)
    take = min(len(gen), len(imp_all))
    imp = imp_all[np.sort(rng.choice(len(imp_all), size=take, replace=False))]

    pairs = np.concatenate([gen, imp]).astype(np.int64)
    genuine = np.concatenate([np.ones(len(gen), bool), np.zeros(len(imp), bool)])
    return EvalSplit(held_ds, pairs, genuine, query_idx, gallery_idx)


def split_train_eval(
    dataset: LabeledDataset, holdout_fraction: float, seed: int
) -> tuple[LabeledDataset, EvalSplit]:
    """Disjoint-identity train set (relabeled) and evaluation split."""
    split = build_eval_split(dataset, holdout_fraction, seed)
    held = np.unique(split.dataset.identities)
    train_rows = np.flatnonzero(~np.isin(dataset.identities, held))
    if len(train_rows) == 0:
        raise ValueError("holdout consumed every identity; nothing left to train on")
    return dataset.subset(train_rows).relabel(), split


def concat_datasets(parts: list[LabeledDataset], domain: str | None = None) -> LabeledDataset:
    """Stack datasets, offsetting labels so the label spaces stay disjoint."""
    if not parts:
        raise ValueError("nothing to concatenate")
    offsets = np.cumsum([0] + [p.num_identities for p in parts])
    return LabeledDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.identities + off for p, off in zip(parts, offsets)]),
        domain or parts[0].domain,
        int(offsets[-1]),
    )


# -- text serialization ------------------------------------------------------
#
# line 1:  feduda-dataset 1 n=<rows> dim=<cols> num_identities=<k> domain=<name>
# line 2+: <domain>,<identity>,<f_0>,...,<f_{dim-1}>
#
# Floats use repr(), the shortest decimal string that round-trips exactly.

_MAGIC = "feduda-dataset"
_FORMAT_VERSION = 1


def save_dataset(path, dataset: LabeledDataset) -> None:
    lines = [
        f"{_MAGIC} {_FORMAT_VERSION} n={len(dataset)} dim={dataset.input_dim} "
        f"num_identities={dataset.num_identities} domain={dataset.domain}"
    ]
    for row, ident in zip(dataset.features.tolist(), dataset.identities.tolist()):
        lines.append(",".join([dataset.domain, str(ident)] + [repr(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> LabeledDataset:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 6 or header[0] != _MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        if int(header[1]) != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header[1]}")
        meta = dict(tok.split("=", 1) for tok in header[2:])
        n, dim = int(meta["n"]), int(meta["dim"])
        feats = np.empty((n, dim))
        ids = np.empty(n, dtype=np.int64)
        for k in range(n):
            parts = fh.readline().rstrip("\n").split(",")
            if len(parts) != dim + 2:
                raise ValueError(f"{path}: line {k + 2} has {len(parts)} fields, expected {dim + 2}")
            ids[k] = int(parts[1])
            feats[k] = [float(v) for v in parts[2:]]
    return LabeledDataset(feats, ids, meta["domain"], int(meta["num_identities"]))

