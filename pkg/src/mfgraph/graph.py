"""Per-sample feature graphs.

Every record becomes one graph: nine major nodes (one per feature group)
wired by a fixed skeleton, one child node per imported DLL hanging off the
Imported node, and one child node per section hanging off the Section
node. Node attributes are 256 encoded values followed by an 11-way node
type one-hot (width 267).
"""

from __future__ import annotations

import base64
import functools
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .records import NUM_DATA_DIRECTORIES, FeatureRecord

MAJOR_NODES = ("G", "H", "I", "E", "Sec", "BH", "BEH", "Str", "D")
CHILD_NODES = ("dll", "section")
NODE_TYPES = MAJOR_NODES + CHILD_NODES
BASE_WIDTH = 256
ATTR_WIDTH = BASE_WIDTH + len(NODE_TYPES)  # 267
_MAJOR_INDEX = {name: i for i, name in enumerate(MAJOR_NODES)}
_TYPE_INDEX = {name: i for i, name in enumerate(NODE_TYPES)}

TIMESTAMP_SCALE = 2.0 ** 32
ENTROPY_SCALE = 8.0
# log1p of a 32-bit quantity; keeps every size-like scalar in [0, 1]
LOG_SCALE = float(np.log1p(2.0 ** 32))


# --------------------------------------------------------------------------
# skeletons
# --------------------------------------------------------------------------

def _pair(a, b):
    if a not in _MAJOR_INDEX or b not in _MAJOR_INDEX:
        raise SchemaError(f"unknown major node in edge {a}-{b}")
    if a == b:
        raise SchemaError(f"self-loop {a}-{b} not allowed in a skeleton")
    return (a, b) if _MAJOR_INDEX[a] < _MAJOR_INDEX[b] else (b, a)


def _is_connected(n, edges):
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen, stack = {0}, [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


@dataclass(frozen=True)
class SkeletonConfig:
    """Undirected edges between the nine major nodes."""

    edges: tuple
    name: str = "custom"

    def __post_init__(self):
        pairs = [_pair(*e) for e in self.edges]
        if len(set(pairs)) != len(pairs):
            raise SchemaError(f"duplicate edges in skeleton {self.name!r}")
        object.__setattr__(self, "edges", tuple(sorted(pairs, key=lambda p: (_MAJOR_INDEX[p[0]], _MAJOR_INDEX[p[1]]))))
        if not _is_connected(len(MAJOR_NODES), self.index_pairs()):
            raise SchemaError(f"skeleton {self.name!r} does not connect all major nodes")

    def index_pairs(self):
        return [(_MAJOR_INDEX[a], _MAJOR_INDEX[b]) for a, b in self.edges]

    def has_edge(self, a, b):
        return _pair(a, b) in self.edges

    def degree(self, node):
        return sum(node in e for e in self.edges)

    @classmethod
    def from_strings(cls, edges, name="custom"):
        """Build from ``["Str-BH", ...]`` style edge strings."""
        return cls(tuple(tuple(s.split("-")) for s in edges), name)

    def to_strings(self):
        return [f"{a}-{b}" for a, b in self.edges]


_DEFAULT_EDGES = (
    ("Str", "BH"), ("Str", "BEH"), ("Str", "Sec"), ("Str", "D"),
    ("Str", "H"), ("Str", "G"), ("G", "I"), ("G", "E"),
)


def default_skeleton() -> SkeletonConfig:
    return SkeletonConfig(_DEFAULT_EDGES, "default")


def _edit(base, remove=(), add=()):
    drop = {_pair(*e) for e in remove}
    kept = [e for e in base if _pair(*e) not in drop]
    return tuple(kept) + tuple(add)


def _ring_variant():
    ring = ("G", "Sec", "H", "Str", "BH", "BEH", "D")
    # a 7-cycle where each node also links the 4 non-adjacent nodes is K7
    edges = [(ring[i], ring[j]) for i in range(len(ring)) for j in range(i + 1, len(ring))]
    return tuple(edges) + (("G", "I"), ("G", "E"))


_V2 = _edit(_DEFAULT_EDGES, remove=[("Str", "D")], add=[("G", "D"), ("D", "Sec")])
_V5 = _edit(_DEFAULT_EDGES, remove=[("Str", "D")], add=[("H", "D")])
_VARIANTS = {
    1: _DEFAULT_EDGES,
    # D as the bridge between G and Sec, detached from Str
    2: _V2,
    3: _edit(_V2, remove=[("D", "Sec")]),
    # G-Str removed; G stays reachable through G-D
    4: _edit(_DEFAULT_EDGES, remove=[("G", "Str")], add=[("G", "D")]),
    5: _V5,
    6: _V5 + (("G", "D"),),
    # H as the bridge between Str and G, also tied to Sec
    7: _edit(_DEFAULT_EDGES, remove=[("Str", "G")], add=[("H", "G"), ("H", "Sec")]),
    8: _ring_variant(),
}


def variant_skeleton(variant_id: int) -> SkeletonConfig:
    """Ablation skeletons 1-8; 1 is the default."""
    if variant_id not in _VARIANTS:
        raise ValueError(f"unknown skeleton variant {variant_id}; expected 1..8")
    return SkeletonConfig(_VARIANTS[variant_id], "default" if variant_id == 1 else f"variant-{variant_id}")


def load_skeleton(spec) -> SkeletonConfig:
    """Resolve ``default``, ``variant-N`` or a TOML file with an ``edges`` list."""
    spec = str(spec)
    if spec == "default":
        return default_skeleton()
    if spec.startswith("variant-"):
        return variant_skeleton(int(spec.split("-", 1)[1]))
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(spec, "rb") as fh:
        cfg = tomllib.load(fh)
    if "edges" not in cfg:
        raise SchemaError(f"{spec}: skeleton file needs an 'edges' list")
    return SkeletonConfig.from_strings(cfg["edges"], cfg.get("name", Path(spec).stem))


# --------------------------------------------------------------------------
# node encoding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeEncoderConfig:
    base_width: int = BASE_WIDTH
    api_buckets: int = 128
    export_buckets: int = 128
    dll_name_buckets: int = 64
    section_buckets: int = 64
    header_buckets: int = 64


def _clean(name) -> str:
    return "".join(ch for ch in str(name) if " " <= ch <= "~").strip()


@functools.lru_cache(maxsize=1 << 16)
def hash_name(name: str, buckets: int):
    """Signed hashing: bucket from the 64-bit BLAKE2b digest modulo
    ``buckets``, sign from the parity of that digest's set bits."""
    h = int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")
    sign = -1.0 if bin(h).count("1") & 1 else 1.0
    return h % buckets, sign


def hashed_block(names, buckets: int) -> np.ndarray:
    out = np.zeros(buckets)
    for name in names:
        name = _clean(name)
        if not name:
            continue
        idx, sign = hash_name(name, buckets)
        out[idx] += sign
    return out


def _log(values):
    return np.log1p(np.maximum(np.asarray(values, dtype=np.float64), 0.0)) / LOG_SCALE


def _l1(values):
    v = np.asarray(values, dtype=np.float64)
    total = v.sum()
    return v / total if total > 0 else np.zeros_like(v)


def encode_general(g, cfg=None):
    return np.array([
        _log(g.size), _log(g.vsize), g.has_debug, _log(g.exports), _log(g.imports),
        g.has_relocations, g.has_resources, g.has_signature, g.has_tls, _log(g.symbols),
    ], dtype=np.float64)


def encode_header(h, cfg: NodeEncoderConfig):
    coff_names = [f"machine:{h.machine}"] + [f"coff:{c}" for c in h.characteristics]
    opt_names = [f"subsystem:{h.subsystem}", f"magic:{h.magic}"] + [f"dll:{c}" for c in h.dll_characteristics]
    return np.concatenate([
        [max(h.timestamp, 0) / TIMESTAMP_SCALE],
        _log(h.versions()),
        hashed_block(coff_names, cfg.header_buckets),
        hashed_block(opt_names, cfg.header_buckets),
    ])


def encode_imports(imports, cfg: NodeEncoderConfig):
    dlls = [_clean(d).lower() for d in imports]
    qualified = [f"{_clean(d).lower()}:{api}" for d, apis in imports.items() for api in apis]
    return np.concatenate([
        _log([len(imports), len(qualified)]),
        hashed_block(dlls, cfg.dll_name_buckets),
        hashed_block(qualified, cfg.api_buckets),
    ])


def encode_exports(exports, cfg: NodeEncoderConfig):
    return np.concatenate([_log([len(exports)]), hashed_block(exports, cfg.export_buckets)])


def encode_sections(sections, entry, cfg: NodeEncoderConfig):
    entropies = [s.entropy for s in sections] or [0.0]
    entry_props = [p for s in sections if s.name == entry for p in s.props]
    counts = [
        len(sections),
        sum(s.size == 0 for s in sections),
        sum(s.name == "" for s in sections),
        sum("MEM_READ" in s.props and "MEM_EXECUTE" in s.props for s in sections),
        sum("MEM_WRITE" in s.props for s in sections),
    ]
    return np.concatenate([
        _log(counts),
        np.array([np.mean(entropies), max(entropies), min(entropies)]) / ENTROPY_SCALE,
        hashed_block([s.name for s in sections], cfg.section_buckets),
        hashed_block([entry], cfg.section_buckets),
        hashed_block(entry_props, cfg.section_buckets),
    ])


def encode_strings(s, cfg=None):
    return np.concatenate([
        _log([s.numstrings, s.avlength, s.printables]),
        [s.entropy / ENTROPY_SCALE],
        _log([s.paths, s.urls, s.registry, s.MZ]),
        _l1(s.printabledist),
    ])


def encode_datadirs(dirs, cfg=None):
    values = [(d.size, d.virtual_address) for d in dirs[:NUM_DATA_DIRECTORIES]]
    return _log(np.array(values, dtype=np.float64).ravel())


def encode_dll(dll, apis, cfg: NodeEncoderConfig):
    return np.concatenate([
        _log([len(apis)]),
        hashed_block(apis, cfg.api_buckets),
        hashed_block([_clean(dll).lower()], cfg.dll_name_buckets),
    ])


def encode_section(section, cfg: NodeEncoderConfig):
    return np.concatenate([
        _log([section.size, section.vsize]),
        [section.entropy / ENTROPY_SCALE],
        hashed_block([section.name], cfg.section_buckets),
        hashed_block(section.props, cfg.section_buckets),
    ])


def _pad(vec, width):
    vec = np.asarray(vec, dtype=np.float64)
    if len(vec) > width:
        raise ValueError(f"encoded group has {len(vec)} values, more than {width}")
    out = np.zeros(width)
    out[: len(vec)] = vec
    return out


def encode_group(node_type: str, payload, cfg: NodeEncoderConfig = NodeEncoderConfig()) -> np.ndarray:
    """Encode one group's payload into its zero-padded 256-wide block.

    ``payload`` is the record (for major nodes), ``(dll, apis)`` for a DLL
    child, or a SectionEntry for a section child.
    """
    if node_type == "G":
        vec = encode_general(payload.general)
    elif node_type == "H":
        vec = encode_header(payload.header, cfg)
    elif node_type == "I":
        vec = encode_imports(payload.imports, cfg)
    elif node_type == "E":
        vec = encode_exports(payload.exports, cfg)
    elif node_type == "Sec":
        vec = encode_sections(payload.sections, payload.entry, cfg)
    elif node_type == "BH":
        vec = _l1(payload.histogram)
    elif node_type == "BEH":
        vec = _l1(payload.byteentropy)
    elif node_type == "Str":
        vec = encode_strings(payload.strings)
    elif node_type == "D":
        vec = encode_datadirs(payload.datadirectories)
    elif node_type == "dll":
        vec = encode_dll(payload[0], payload[1], cfg)
    elif node_type == "section":
        vec = encode_section(payload, cfg)
    else:
        raise ValueError(f"unknown node type {node_type!r}")
    return _pad(vec, cfg.base_width)


def encode_node(node_type: str, payload, cfg: NodeEncoderConfig = NodeEncoderConfig()) -> np.ndarray:
    """256-wide encoded block followed by the node-type one-hot."""
    onehot = np.zeros(len(NODE_TYPES))
    onehot[_TYPE_INDEX[node_type]] = 1.0
    return np.concatenate([encode_group(node_type, payload, cfg), onehot])


# --------------------------------------------------------------------------
# graphs
# --------------------------------------------------------------------------

@dataclass
class FeatureGraph:
    node_types: list
    x: np.ndarray  # n x 267
    edges: np.ndarray  # m x 2, i < j, no self-loops
    label: int
    sha256: str = ""
    appeared: tuple = (0, 1)

    @property
    def n(self):
        return len(self.node_types)

    def adjacency(self):
        a = np.zeros((self.n, self.n))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def is_connected(self):
        return _is_connected(self.n, self.edges.tolist())

    def permuted(self, perm):
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        edges = inverse[self.edges] if len(self.edges) else self.edges
        edges = np.sort(edges, axis=1) if len(edges) else edges
        return FeatureGraph([self.node_types[i] for i in perm], self.x[perm], edges,
                            self.label, self.sha256, self.appeared)


def _cosine_matrix(x_major):
    """Pairwise cosine similarity of the rows (zero rows count as orthogonal)."""
    norms = np.linalg.norm(x_major, axis=1)
    norms[norms == 0] = 1.0
    sim = (x_major / norms[:, None]) @ (x_major / norms[:, None]).T
    return sim


def _similarity_skeleton(x_major, threshold):
    sim = _cosine_matrix(x_major)
    n = len(x_major)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if sim[i, j] >= threshold]
    # join leftover components through their most similar cross pair
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        parent[find(i)] = find(j)
    ranked = sorted(((sim[i, j], i, j) for i in range(n) for j in range(i + 1, n)), key=lambda t: (-t[0], t[1], t[2]))
    for _, i, j in ranked:
        if find(i) != find(j):
            parent[find(i)] = find(j)
            pairs.append((i, j))
    return pairs


def build_graph(record: FeatureRecord, skeleton: SkeletonConfig | None = None,
                cfg: NodeEncoderConfig = NodeEncoderConfig(),
                strategy: str = "skeleton", similarity_threshold: float = 0.5) -> FeatureGraph:
    """Turn one record into a FeatureGraph.

    Node order: the nine majors in MAJOR_NODES order, then one node per
    imported DLL (record order, edged to I), then one per section (record
    order, edged to Sec). ``strategy="similarity"`` wires the majors by
    cosine similarity of their encoded blocks instead of the skeleton.
    """
    if skeleton is None:
        skeleton = default_skeleton()
    rows = [encode_node(t, record, cfg) for t in MAJOR_NODES]
    types = list(MAJOR_NODES)
    if strategy == "skeleton":
        edges = list(skeleton.index_pairs())
    elif strategy == "similarity":
        edges = _similarity_skeleton(np.array(rows)[:, :BASE_WIDTH], similarity_threshold)
    else:
        raise ValueError(f"unknown edge strategy {strategy!r}")
    i_node, sec_node = _MAJOR_INDEX["I"], _MAJOR_INDEX["Sec"]
    for dll, apis in record.imports.items():
        edges.append((i_node, len(types)))
        rows.append(encode_node("dll", (dll, apis), cfg))
        types.append("dll")
    for section in record.sections:
        edges.append((sec_node, len(types)))
        rows.append(encode_node("section", section, cfg))
        types.append("section")
    return FeatureGraph(
        node_types=types,
        x=np.array(rows),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        label=record.label,
        sha256=record.sha256,
        appeared=tuple(record.appeared),
    )


def select_k(graphs, pooling_rate: float) -> int:
    """Largest k such that at least ``pooling_rate`` of the graphs have n >= k.

    Accepts FeatureGraphs or plain node counts.
    """
    if not 0.0 < pooling_rate <= 1.0:
        raise ValueError(f"pooling rate must lie in (0, 1], got {pooling_rate}")
    counts = sorted((g if isinstance(g, (int, np.integer)) else g.n for g in graphs), reverse=True)
    if not counts:
        raise ValueError("select_k needs at least one graph")
    total = len(counts)
    needed = next(m for m in range(1, total + 1) if m / total >= pooling_rate)
    return max(int(counts[needed - 1]), 1)


# --------------------------------------------------------------------------
# cache
# --------------------------------------------------------------------------

def graph_to_dict(g: FeatureGraph):
    x = np.ascontiguousarray(g.x, dtype="<f8")
    return {
        "sha256": g.sha256,
        "appeared": list(g.appeared),
        "label": int(g.label),
        "n": g.n,
        "width": int(x.shape[1]),
        "node_types": list(g.node_types),
        "x": base64.b64encode(x.tobytes()).decode("ascii"),
        "edges": g.edges.tolist(),
    }


def graph_from_dict(d) -> FeatureGraph:
    try:
        n, width = int(d["n"]), int(d["width"])
        x = np.frombuffer(base64.b64decode(d["x"]), dtype="<f8").astype(np.float64)
        if x.size != n * width or len(d["node_types"]) != n:
            raise SchemaError("graph cache entry has inconsistent sizes")
        return FeatureGraph(
            node_types=list(d["node_types"]),
            x=x.reshape(n, width),
            edges=np.array(d["edges"], dtype=np.int64).reshape(-1, 2),
            label=int(d["label"]),
            sha256=d.get("sha256", ""),
            appeared=tuple(d.get("appeared", (0, 1))),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad graph cache entry: {exc}") from None


def write_graph_cache(graphs, path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_dict(g), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_graph_cache(path) -> list:
    graphs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                graphs.append(graph_from_dict(json.loads(line)))
            except (json.JSONDecodeError, SchemaError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return graphs
