"""Deliberately naive brute-force oracles, independent of the library's data structures."""
from __future__ import annotations


def forward_edge_list(db):
    """All resolved forward FK edges as (fk column key, src (t,r), dst (t,r)), from raw tokens."""
    edges = []
    names = [t.name for t in db.tables]
    for ti, table in enumerate(db.tables):
        for ci, col in enumerate(table.columns):
            if col.kind.tag != "foreign_key":
                continue
            ref_table, ref_column = col.kind.references
            rt = names.index(ref_table)
            ref_col = next(c for c in db.tables[rt].columns if c.name == ref_column)
            keymap = {tok: ri for ri, tok in enumerate(ref_col.values) if tok is not None}
            for ri, token in enumerate(col.values):
                if token is not None and token in keymap:
                    edges.append(((ti, ci), (ti, ri), (rt, keymap[token])))
    return edges


def closure_oracle(db, target):
    """Set-expansion to fixpoint: ancestors first, then descendants; returns (V_S, induced forward edges)."""
    edges = forward_edge_list(db)
    vs = {target}
    while True:
        add = {s for (_, s, d) in edges if d in vs and s not in vs}
        if not add:
            break
        vs |= add
    while True:
        add = {d for (_, s, d) in edges if s in vs and d not in vs}
        if not add:
            break
        vs |= add
    induced = [(k, s, d) for (k, s, d) in edges if s in vs and d in vs]
    return vs, induced


def edge_type_once_oracle(db, target):
    """Round-based expansion where an edge type that contributes is spent for the rest of the run."""
    edges = forward_edge_list(db)
    types = sorted({k for (k, _, _) in edges})
    vs = {target}
    used = set()
    for phase in ("ancestors", "descendants"):
        while True:
            new_nodes = set()
            contributed = set()
            for k in types:
                if k in used:
                    continue
                if phase == "ancestors":
                    crossing = {s for (kk, s, d) in edges if kk == k and d in vs and s not in vs}
                else:
                    crossing = {d for (kk, s, d) in edges if kk == k and s in vs and d not in vs}
                if crossing:
                    contributed.add(k)
                    new_nodes |= crossing
            if not new_nodes:
                break
            used |= contributed
            vs |= new_nodes
    return vs


def auroc_pairwise(scores, labels):
    """O(P*N) comparison of every positive/negative score pair, ties worth half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def groupby_oracle(db, child_table, fk_column, value_column):
    """Depth-1 SUM/COUNT per parent row via plain dict group-by over raw cells."""
    names = [t.name for t in db.tables]
    table = db.tables[names.index(child_table)]
    fk_col = next(c for c in table.columns if c.name == fk_column)
    val_col = next(c for c in table.columns if c.name == value_column)
    ref_table, ref_column = fk_col.kind.references
    rt = names.index(ref_table)
    ref_col = next(c for c in db.tables[rt].columns if c.name == ref_column)
    keymap = {tok: ri for ri, tok in enumerate(ref_col.values) if tok is not None}
    counts: dict[int, int] = {}
    sums: dict[int, float] = {}
    for token, value in zip(fk_col.values, val_col.values):
        if token is None or token not in keymap:
            continue
        parent = keymap[token]
        counts[parent] = counts.get(parent, 0) + 1
        if value is not None:
            sums[parent] = sums.get(parent, 0.0) + value
    return counts, sums
