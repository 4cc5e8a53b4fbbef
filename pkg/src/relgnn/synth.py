"""Deterministic synthetic relational datasets with a planted single-table or relational signal."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .rdb import Column, ColumnKind, Database, RdbError, Table, _resolve_foreign_keys, write_dataset

__all__ = ["TEMPLATES", "SIGNALS", "SynthSpec", "generate"]

TEMPLATES = ("flat", "parent_child", "three_level")
SIGNALS = ("single_table", "child_aggregate", "grandchild_aggregate")

_TEMPLATE_DEPTH = {"flat": 0, "parent_child": 1, "three_level": 2}
_SIGNAL_DEPTH = {"single_table": 0, "child_aggregate": 1, "grandchild_aggregate": 2}

_COLORS = ("amber", "blue", "green", "red", "teal")
_FLAVORS = ("bitter", "salty", "sour", "sweet")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one dataset; every byte of the output is a function of these fields."""

    seed: int
    n_targets: int
    template: str = "parent_child"
    signal: str = "child_aggregate"
    noise: float = 0.0
    children: tuple[int, int] = (1, 6)  # children per parent, inclusive uniform range

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise RdbError(f"unknown template {self.template!r}")
        if self.signal not in SIGNALS:
            raise RdbError(f"unknown signal {self.signal!r}")
        if _SIGNAL_DEPTH[self.signal] > _TEMPLATE_DEPTH[self.template]:
            raise RdbError(f"signal {self.signal!r} does not fit template {self.template!r}")
        if not 0.0 <= self.noise < 1.0:
            raise RdbError(f"noise rate must be in [0, 1), got {self.noise}")
        if self.n_targets < 2:
            raise RdbError("need at least 2 target rows")
        lo, hi = self.children
        if lo < 0 or hi < lo:
            raise RdbError(f"bad children-per-parent range {self.children}")


def generate(spec: SynthSpec, out_dir: str | Path | None = None) -> Database:
    """Build the dataset in memory; writes schema.json + CSVs when out_dir is given."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_targets
    lo, hi = spec.children

    # target-table columns; only trait can carry signal, the rest are decoys
    trait = rng.normal(0.0, 1.0, n)
    clutter = rng.normal(0.0, 1.0, n)
    clutter_null = rng.random(n) < 0.02
    color = rng.integers(0, len(_COLORS), n)
    joined_days = rng.integers(0, 3650, n)
    joined_secs = rng.integers(0, 24 * 3600, n)

    child_parent: list[int] = []
    child_amount: list[float] = []
    child_flavor: list[int] = []
    grand_child: list[int] = []
    grand_amount: list[float] = []
    if spec.template != "flat":
        for p in range(n):
            for _ in range(int(rng.integers(lo, hi + 1))):
                child_parent.append(p)
                child_amount.append(float(rng.uniform(0.0, 10.0)))
                child_flavor.append(int(rng.integers(0, len(_FLAVORS))))
    if spec.template == "three_level":
        for c in range(len(child_parent)):
            for _ in range(int(rng.integers(lo, hi + 1))):
                grand_child.append(c)
                grand_amount.append(float(rng.uniform(0.0, 10.0)))

    # left folds in row order so a plain group-by over the written CSVs lands on identical floats
    if spec.signal == "single_table":
        score = [float(v) for v in trait]
    elif spec.signal == "child_aggregate":
        score = [0.0] * n
        for c, p in enumerate(child_parent):
            score[p] += child_amount[c]
    else:
        score = [0.0] * n
        for g, c in enumerate(grand_child):
            score[child_parent[c]] += grand_amount[g]
    threshold = float(np.median(np.asarray(score)))
    labels = [s > threshold for s in score]
    flips = rng.random(n) < spec.noise
    labels = [bool(l) ^ bool(f) for l, f in zip(labels, flips)]

    epoch = datetime(2015, 1, 1)
    tables = [Table("Target", [
        Column("target_id", ColumnKind("primary_key"), False, [f"t{i}" for i in range(n)]),
        Column("trait", ColumnKind("scalar"), False, [float(v) for v in trait]),
        Column("clutter", ColumnKind("scalar"), False,
               [None if dead else float(v) for v, dead in zip(clutter, clutter_null)]),
        Column("color", ColumnKind("categorical"), False, [_COLORS[i] for i in color]),
        Column("joined", ColumnKind("datetime"), False,
               [epoch + timedelta(days=int(d), seconds=int(s)) for d, s in zip(joined_days, joined_secs)]),
        Column("label", ColumnKind("categorical"), True, ["1" if l else "0" for l in labels]),
    ])]
    if spec.template != "flat":
        tables.append(Table("Child", [
            Column("child_id", ColumnKind("primary_key"), False, [f"c{i}" for i in range(len(child_parent))]),
            Column("target_id", ColumnKind("foreign_key", ("Target", "target_id")), False,
                   [f"t{p}" for p in child_parent]),
            Column("amount", ColumnKind("scalar"), False, child_amount),
            Column("flavor", ColumnKind("categorical"), False, [_FLAVORS[i] for i in child_flavor]),
        ]))
    if spec.template == "three_level":
        tables.append(Table("Grand", [
            Column("grand_id", ColumnKind("primary_key"), False, [f"g{i}" for i in range(len(grand_child))]),
            Column("child_id", ColumnKind("foreign_key", ("Child", "child_id")), False,
                   [f"c{c}" for c in grand_child]),
            Column("amount", ColumnKind("scalar"), False, grand_amount),
        ]))

    db = Database(tables, {}, [], [(0, 5)])
    _resolve_foreign_keys(db, strict=True)
    if out_dir is not None:
        write_dataset(db, out_dir)
    return db
