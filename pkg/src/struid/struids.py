"""StruId table persistence: one TSV row per entity.

Columns: entity_type, raw_id, n1..nL, disambiguator (empty when absent).
"""

from __future__ import annotations

from pathlib import Path

from .errors import DataError
from .kg import ENTITY_TYPES, KnowledgeGraph
from .tokenizer import StruId


def write_struid_table(path, ids: dict[str, list[StruId]], graph: KnowledgeGraph) -> None:
    levels = len(next(iter(ids.values()))[0].indices)
    header = ["entity_type", "raw_id"] + [f"n{l + 1}" for l in range(levels)] + ["disambiguator"]
    lines = ["\t".join(header)]
    for t in ENTITY_TYPES:
        for local, sid in enumerate(ids.get(t, [])):
            row = [t, graph.entities[t][local]]
            row += [str(i) for i in sid.indices]
            row.append("" if sid.disambiguator is None else str(sid.disambiguator))
            lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_struid_table(path) -> dict[str, list[StruId]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"empty StruId table: {path}")
    header = lines[0].split("\t")
    levels = len([c for c in header if c.startswith("n")])
    out: dict[str, list[StruId]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        fields = line.split("\t")
        t = fields[0]
        indices = tuple(int(v) for v in fields[2:2 + levels])
        disamb = fields[2 + levels]
        out.setdefault(t, []).append(StruId(t, indices, None if disamb == "" else int(disamb)))
    return out
