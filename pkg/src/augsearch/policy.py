"""Stochastic augmentation policies: probabilistic ops, sub-policies, policies.

An operation spec is (kind, p, lam): apply the op at magnitude lam with
probability p, otherwise pass the image through. A sub-policy chains a fixed
number of such ops; a policy is a set of sub-policies; applying a policy to a
dataset yields the union of every sub-policy's (stochastic) pass over it.

All randomness is drawn from an explicitly passed numpy Generator, so a seed
pins the exact augmented bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .imageops import Image, OpKind, apply_op


@dataclass(frozen=True)
class OperationSpec:
    """One stochastic transform: kind applied with probability p at magnitude lam."""

    kind: OpKind
    p: float
    lam: float

    def __post_init__(self):
        if not isinstance(self.kind, OpKind):
            raise ValueError(f"kind must be an OpKind, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class SubPolicy:
    """An ordered chain of operation specs, applied sequentially."""

    ops: tuple[OperationSpec, ...]

    def __post_init__(self):
        if len(self.ops) < 1:
            raise ValueError("a sub-policy needs at least one operation")
        object.__setattr__(self, "ops", tuple(self.ops))


@dataclass(frozen=True)
class Policy:
    """A collection of sub-policies; applying it to a dataset unions their outputs."""

    sub_policies: tuple[SubPolicy, ...]

    def __post_init__(self):
        if len(self.sub_policies) < 1:
            raise ValueError("a policy needs at least one sub-policy")
        object.__setattr__(self, "sub_policies", tuple(self.sub_policies))


@dataclass(frozen=True)
class PolicyProvenance:
    """Where a selected policy came from: fold/round/trial and its loss then."""

    fold: int
    round: int
    trial: int
    loss: float

    def __post_init__(self):
        if not math.isfinite(self.loss):
            raise ValueError(f"provenance loss must be finite, got {self.loss}")


@dataclass(frozen=True)
class PolicySet:
    """The merged search result: policies plus per-policy provenance."""

    policies: tuple[Policy, ...]
    provenance: tuple[PolicyProvenance, ...]

    def __post_init__(self):
        if len(self.policies) < 1:
            raise ValueError("a policy set must be non-empty")
        if len(self.policies) != len(self.provenance):
            raise ValueError("policies and provenance must align")
        object.__setattr__(self, "policies", tuple(self.policies))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def sub_policy_pool(self) -> tuple[SubPolicy, ...]:
        """All sub-policies flattened, in policy order."""
        return tuple(sp for pol in self.policies for sp in pol.sub_policies)


def apply_stochastic_op(
    img: Image,
    spec: OperationSpec,
    rng: np.random.Generator,
    pair_pool=None,
    self_index: int | None = None,
) -> Image:
    """With probability spec.p apply the op, otherwise return the image as-is.

    ``pair_pool`` (anything indexable with a length, e.g. a Dataset) supplies
    SamplePairing partners; the partner is drawn uniformly excluding
    ``self_index``. Cutout's patch center is drawn uniformly over the grid.
    """
    out, _ = _apply_op_traced(img, spec, rng, pair_pool, self_index)
    return out


def _apply_op_traced(img, spec, rng, pair_pool, self_index):
    if rng.random() >= spec.p:
        return img, False
    pair = None
    cutout_center = None
    if spec.kind is OpKind.Cutout:
        cutout_center = (int(rng.integers(img.width)), int(rng.integers(img.height)))
    elif spec.kind is OpKind.SamplePairing:
        if pair_pool is None:
            raise ValueError("SamplePairing requires a pair image")
        pair = _draw_partner(pair_pool, self_index, rng)
    return apply_op(img, spec.kind, spec.lam, pair=pair, cutout_center=cutout_center), True


def _draw_partner(pool, self_index, rng) -> Image:
    n = len(pool)
    if self_index is not None:
        if n < 2:
            raise ValueError("SamplePairing needs at least 2 images to draw a partner")
        j = int(rng.integers(n - 1))
        if j >= self_index:
            j += 1
    else:
        j = int(rng.integers(n))
    partner = pool[j]
    if not isinstance(partner, Image):
        partner = Image(np.ascontiguousarray(partner), 0)
    return partner


def apply_sub_policy(
    img: Image,
    sub_policy: SubPolicy,
    rng: np.random.Generator,
    pair_pool=None,
    self_index: int | None = None,
) -> Image:
    """Sequential composition: op n sees the output of op n-1."""
    out, _ = apply_sub_policy_traced(img, sub_policy, rng, pair_pool, self_index)
    return out


def apply_sub_policy_traced(
    img: Image,
    sub_policy: SubPolicy,
    rng: np.random.Generator,
    pair_pool=None,
    self_index: int | None = None,
) -> tuple[Image, tuple[bool, ...]]:
    """Like apply_sub_policy but also reports which ops fired (branch bookkeeping)."""
    fired = []
    out = img
    for spec in sub_policy.ops:
        out, did = _apply_op_traced(out, spec, rng, pair_pool, self_index)
        fired.append(did)
    return out, tuple(fired)


def iter_augmented(
    dataset,
    policy: Policy,
    rng: np.random.Generator,
) -> Iterator[Image]:
    """Lazily yield the policy-augmented dataset, sub-policy by sub-policy.

    Yields len(policy.sub_policies) * len(dataset) images: for each sub-policy
    in order, one stochastic pass over the dataset in order.
    """
    if len(dataset) == 0:
        raise ValueError("cannot augment an empty dataset")
    for sub_policy in policy.sub_policies:
        for i in range(len(dataset)):
            yield apply_sub_policy(dataset[i], sub_policy, rng, pair_pool=dataset, self_index=i)


def augment_dataset(dataset, policy: Policy, rng: np.random.Generator):
    """Materialize the union of every sub-policy's pass over the dataset.

    The result has n_sub_policies * len(dataset) images with labels preserved.
    """
    from .data import Dataset  # local import; data builds on policy types elsewhere

    images = []
    labels = []
    for img in iter_augmented(dataset, policy, rng):
        images.append(img.pixels)
        labels.append(img.label)
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_count=dataset.class_count,
        name=f"{dataset.name}+aug" if dataset.name else "augmented",
    )


# --- serialization -----------------------------------------------------------

POLICY_SET_VERSION = 1


def _op_to_json(spec: OperationSpec) -> dict:
    return {"kind": spec.kind.value, "p": spec.p, "lambda": spec.lam}


def _op_from_json(obj: dict) -> OperationSpec:
    return OperationSpec(kind=OpKind(obj["kind"]), p=float(obj["p"]), lam=float(obj["lambda"]))


def policy_set_to_json(ps: PolicySet) -> dict:
    return {
        "version": POLICY_SET_VERSION,
        "policies": [
            {
                "sub_policies": [[_op_to_json(op) for op in sp.ops] for sp in pol.sub_policies],
                "fold": prov.fold,
                "round": prov.round,
                "trial": prov.trial,
                "loss": prov.loss,
            }
            for pol, prov in zip(ps.policies, ps.provenance)
        ],
    }


def policy_set_from_json(doc: dict) -> PolicySet:
    if doc.get("version") != POLICY_SET_VERSION:
        raise ValueError(f"unsupported policy set version: {doc.get('version')!r}")
    policies = []
    provenance = []
    for entry in doc["policies"]:
        policies.append(
            Policy(
                tuple(
                    SubPolicy(tuple(_op_from_json(op) for op in sp))
                    for sp in entry["sub_policies"]
                )
            )
        )
        provenance.append(
            PolicyProvenance(
                fold=int(entry["fold"]),
                round=int(entry["round"]),
                trial=int(entry.get("trial", -1)),
                loss=float(entry["loss"]),
            )
        )
    return PolicySet(tuple(policies), tuple(provenance))


def save_policy_set(ps: PolicySet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_set_to_json(ps), fh, indent=2)
        fh.write("\n")


def load_policy_set(path) -> PolicySet:
    with open(path, "r", encoding="utf-8") as fh:
        return policy_set_from_json(json.load(fh))
