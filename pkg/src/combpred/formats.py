"""Text formats: space specs, tree and poset files, sparse datasets, JSON artefacts.

Space specs look like ``family:key=value,key=value``::

    multilabel:d=5            ell_subsets:d=6,l=2        permutations:d=4
    directed_cycles:N=5       subtrees:tree=taxonomy.txt subtrees:parents=-1/0/0/1
    poset_regression:poset=order.txt
    poset_regression:N=4,relation=0>1;1>2;0>2

Dataset rows are ``labels | idx:val idx:val ...`` with 0-based feature
indices.  ``labels`` holds one or more structures separated by ``;``:

* element families: ``3``
* set families: ``0,2,5``; the empty set is ``{}``
* permutations: ``2>0>1`` (best first)
* directed pairs (tournaments, posets, directed cycles): ``0>1,1>2,2>0``
* undirected cycles: ``0-1,1-2,0-2``

Header lines ``# space: <spec>`` and ``# features: <n>`` make a file
self-describing.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .counting import SET_FAMILIES, StructureSpace, transitive_closure
from .errors import MembershipError, ValidationError
from .ridge import Dataset

_SIZE_KEYS = ("d", "N", "n", "size")


def _read_lines(path) -> list[tuple[int, str]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc
    out = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append((no, line))
    return out


def _ints(parts: list[str], path, no: int) -> list[int]:
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise ValidationError(f"{path}:{no}: expected integers, got {' '.join(parts)!r}") from exc


def read_tree(path) -> tuple[int, ...]:
    """Parent array from ``vertex_id parent_id`` lines; vertex ids must be 0..n-1."""
    parents: dict[int, int] = {}
    for no, line in _read_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise ValidationError(f"{path}:{no}: expected 'vertex_id parent_id'")
        v, p = _ints(parts, path, no)
        if v in parents:
            raise ValidationError(f"{path}:{no}: vertex {v} listed twice")
        parents[v] = p
    n = len(parents)
    if sorted(parents) != list(range(n)):
        raise ValidationError(f"{path}: vertex ids must be 0..{n - 1}")
    return tuple(parents[v] for v in range(n))


def write_tree(path, parents: Iterable[int]) -> None:
    Path(path).write_text("".join(f"{v} {p}\n" for v, p in enumerate(parents)))


def read_poset(path, n: int | None = None) -> tuple[int, frozenset]:
    """``u v`` lines meaning u above v; the relation is closed transitively."""
    pairs = []
    for no, line in _read_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise ValidationError(f"{path}:{no}: expected 'u v'")
        pairs.append(tuple(_ints(parts, path, no)))
    size = max((max(p) for p in pairs), default=-1) + 1
    if n is not None:
        if n < size:
            raise ValidationError(f"{path}: element {size - 1} exceeds N={n}")
        size = n
    if size == 0:
        raise ValidationError(f"{path}: empty poset needs an explicit N")
    return size, transitive_closure(pairs)


def _parse_params(text: str) -> dict[str, str]:
    params = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"space parameter {item!r} is not key=value")
        params[key.strip()] = value.strip()
    return params


def _flag(value: str) -> bool:
    if value.lower() in ("1", "true", "yes"):
        return True
    if value.lower() in ("0", "false", "no"):
        return False
    raise ValidationError(f"expected a boolean, got {value!r}")


def parse_space(spec: str, base_dir=None) -> StructureSpace:
    """Build a space from a spec string; relative file paths resolve against ``base_dir``."""
    family, _, rest = spec.strip().partition(":")
    params = _parse_params(rest)
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def path_of(key):
        p = Path(params.pop(key))
        return p if p.is_absolute() else base / p

    def integer(key):
        try:
            return int(params.pop(key))
        except ValueError as exc:
            raise ValidationError(f"{key} must be an integer") from exc

    size_key = next((k for k in _SIZE_KEYS if k in params), None)
    size = integer(size_key) if size_key else None
    try:
        if family in ("hierarchy", "subtrees"):
            if "tree" in params:
                parents = read_tree(path_of("tree"))
            elif "parents" in params:
                parents = tuple(int(v) for v in params.pop("parents").split("/"))
            else:
                raise ValidationError(f"{family} needs tree=<file> or parents=p0/p1/...")
            if family == "hierarchy":
                space = StructureSpace.hierarchy(parents)
            else:
                space = StructureSpace.subtrees(parents, _flag(params.pop("include_empty", "1")))
        elif family == "poset_regression":
            if "poset" in params:
                size, relation = read_poset(path_of("poset"), size)
            elif "relation" in params:
                pairs = []
                for item in filter(None, params.pop("relation").split(";")):
                    u, sep, v = item.partition(">")
                    if not sep:
                        raise ValidationError(f"relation item {item!r} is not u>v")
                    pairs.append((int(u), int(v)))
                relation = transitive_closure(pairs)
            else:
                raise ValidationError("poset_regression needs poset=<file> or relation=u>v;...")
            if size is None:
                raise ValidationError("poset_regression needs N when the relation is inline")
            space = StructureSpace.poset_regression(size, relation)
        else:
            if size is None:
                raise ValidationError(f"{family or spec!r} needs a size (d=... or N=...)")
            if family == "ell_subsets":
                key = "l" if "l" in params else "ell"
                if key not in params:
                    raise ValidationError("ell_subsets needs l=<subset size>")
                space = StructureSpace.ell_subsets(size, integer(key))
            elif family == "multilabel":
                space = StructureSpace.multilabel(size, _flag(params.pop("signed", "0")))
            else:
                space = StructureSpace(family, size)
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad space spec {spec!r}: {exc}") from exc
    if params:
        raise ValidationError(f"unknown parameter(s) for {family}: {', '.join(sorted(params))}")
    return space


# structure syntax


def format_structure(space: StructureSpace, y) -> str:
    fam = space.family
    if fam in SET_FAMILIES:
        return ",".join(map(str, sorted(y))) if y else "{}"
    if fam == "permutations":
        return ">".join(map(str, y))
    if fam in ("multiclass", "ordinal", "poset_regression", "hierarchy"):
        return str(y)
    if not y:
        return "{}"
    sep = "-" if fam == "undirected_cycles" else ">"
    return ",".join(f"{u}{sep}{v}" for u, v in sorted(y))


def parse_structure(space: StructureSpace, text: str) -> Any:
    fam = space.family
    text = text.strip()
    try:
        if fam in ("multiclass", "ordinal", "poset_regression", "hierarchy"):
            y: Any = int(text)
        elif fam == "permutations":
            y = tuple(int(v) for v in text.split(">"))
        elif text in ("{}", ""):
            y = frozenset()
        elif fam in SET_FAMILIES:
            y = frozenset(int(v) for v in text.split(","))
        else:
            sep = "-" if fam == "undirected_cycles" else ">"
            pairs = []
            for item in text.split(","):
                u, ok, v = item.partition(sep)
                if not ok:
                    raise ValueError(f"pair {item!r} lacks {sep!r}")
                pairs.append((int(u), int(v)))
            y = frozenset(pairs)
    except ValueError as exc:
        raise MembershipError(f"cannot parse {fam} structure {text!r}: {exc}") from exc
    return space.check(y)


# datasets


def _parse_features(text: str, where: str) -> dict[int, float]:
    row = {}
    for item in text.split():
        idx, sep, val = item.partition(":")
        try:
            if not sep:
                raise ValueError
            row[int(idx)] = float(val)
        except ValueError as exc:
            raise ValidationError(f"{where}: feature {item!r} is not idx:val") from exc
        if int(idx) < 0:
            raise ValidationError(f"{where}: negative feature index {idx}")
    return row


def _header(lines: list[str]) -> dict[str, str]:
    out = {}
    for raw in lines:
        s = raw.strip()
        if not s.startswith("#"):
            continue
        key, sep, value = s[1:].partition(":")
        if sep and key.strip() in ("space", "features"):
            out[key.strip()] = value.strip()
    return out


def _dense(rows: list[dict[int, float]], n_features: int | None, where) -> np.ndarray:
    width = max((max(r) + 1 for r in rows if r), default=0)
    if n_features is not None:
        if width > n_features:
            raise ValidationError(f"{where}: feature index {width - 1} exceeds {n_features} features")
        width = n_features
    out = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        for j, v in r.items():
            out[i, j] = v
    return out


def read_dataset(path, space: StructureSpace | None = None, n_features: int | None = None) -> Dataset:
    """Load ``labels | idx:val ...`` rows; header lines fill in a missing space or width."""
    path = Path(path)
    try:
        raw = path.read_text().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc
    head = _header(raw)
    if space is None:
        if "space" not in head:
            raise ValidationError(f"{path}: no '# space:' header and no space given")
        space = parse_space(head["space"], path.parent)
    if n_features is None and "features" in head:
        n_features = int(head["features"])
    labels, rows = [], []
    for no, line in enumerate(raw, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        label_text, sep, feat_text = line.partition("|")
        if not sep:
            raise ValidationError(f"{path}:{no}: missing '|' between labels and features")
        where = f"{path}:{no}"
        try:
            labels.append([parse_structure(space, s) for s in label_text.split(";")])
        except MembershipError as exc:
            raise MembershipError(f"{where}: {exc}") from exc
        rows.append(_parse_features(feat_text, where))
    if not rows:
        raise ValidationError(f"{path}: no examples")
    return Dataset(_dense(rows, n_features, path), labels, space)


def read_inputs(path, n_features: int | None = None) -> np.ndarray:
    """Feature rows for prediction; a ``labels |`` prefix is allowed and ignored."""
    path = Path(path)
    rows = []
    for no, line in _read_lines(path):
        rows.append(_parse_features(line.rpartition("|")[2], f"{path}:{no}"))
    if not rows:
        raise ValidationError(f"{path}: no input rows")
    return _dense(rows, n_features, path)


def format_features(x: np.ndarray) -> str:
    return " ".join(f"{j}:{float(v)!r}" for j, v in enumerate(x) if v != 0)


def write_dataset(path, data: Dataset) -> None:
    if data.inputs is None:
        raise ValidationError("only datasets with explicit inputs can be written")
    lines = [f"# space: {data.space.describe()}", f"# features: {data.inputs.shape[1]}"]
    for ys, x in zip(data.label_sets, data.inputs):
        labels = ";".join(format_structure(data.space, y) for y in ys)
        lines.append(f"{labels} | {format_features(x)}")
    write_text_atomic(path, "\n".join(lines) + "\n")


# JSON artefacts


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    write_text_atomic(path, dump_json(obj))


def read_json(path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
