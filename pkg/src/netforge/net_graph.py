"""Editable network-topology model: layers, blob edges, phase rules,
validation diagnostics, deterministic layout, and transfer-learning edits.

NetModel values are immutable; every edit returns a new model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .proto_schema import LayerCatalog
from .prototext import Block, Document, Scalar

PHASES = ("TRAIN", "TEST")

RANK_SPACING = 120.0
NODE_SPACING = 180.0

# Bookkeeping entries lifted out of the layer block into LayerNode fields.
_BOOKKEEPING = ("name", "type", "bottom", "top", "include", "exclude")

# Learnable-blob counts per layer type; the schema does not encode this.
LEARNABLE_BLOBS = {
    "Convolution": 2,
    "Deconvolution": 2,
    "InnerProduct": 2,
    "Scale": 2,
    "Embed": 2,
    "Bias": 1,
    "PReLU": 1,
    "BatchNorm": 3,
}

# Layer types allowed to have zero tops.
_SINK_TYPES = {"SoftmaxWithLoss", "EuclideanLoss", "HingeLoss", "ContrastiveLoss",
               "InfogainLoss", "SigmoidCrossEntropyLoss", "Accuracy", "Silence",
               "HDF5Output"}


class NetGraphError(Exception):
    pass


class NotANetDocument(NetGraphError):
    pass


class LegacyFormatUnsupported(NetGraphError):
    pass


class NoSuchLayer(NetGraphError):
    pass


class DuplicateLayerName(NetGraphError):
    pass


class UnknownLayerType(NetGraphError):
    pass


class IndexOutOfRange(NetGraphError):
    pass


@dataclass(frozen=True)
class LayerNode:
    name: str
    type_name: str
    bottoms: tuple[str, ...] = ()
    tops: tuple[str, ...] = ()
    phases: frozenset = frozenset(PHASES)
    params: Block = Block()
    position: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class BlobEdge:
    producer: tuple[str, int]   # (layer name, top index)
    consumer: tuple[str, int]   # (layer name, bottom index)
    blob_name: str
    is_in_place: bool


@dataclass(frozen=True)
class UiState:
    hidden_edge_blobs: frozenset = frozenset()
    zoom: float = 1.0
    pan: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class NetModel:
    net_name: str = ""
    layers: tuple[LayerNode, ...] = ()
    ui_state: UiState = UiState()

    def layer(self, name: str) -> LayerNode:
        for l in self.layers:
            if l.name == name:
                return l
        raise NoSuchLayer(name)

    def has_layer(self, name: str) -> bool:
        return any(l.name == name for l in self.layers)

    def replace_layer(self, name: str, new: LayerNode) -> "NetModel":
        layers = tuple(new if l.name == name else l for l in self.layers)
        return replace(self, layers=layers)


@dataclass(frozen=True)
class TopologyDiagnostic:
    kind: str  # Cycle | DanglingBottom | DuplicateLayerName | MultipleProducers
               # | UnknownLayerType | PhaseMismatch
    subjects: tuple[str, ...]
    message: str


# ---------------------------------------------------------------------------
# Document conversion

def _phases_from_block(block: Block) -> frozenset:
    includes = [v for v in block.values("include") if isinstance(v, Block)]
    excludes = [v for v in block.values("exclude") if isinstance(v, Block)]

    def phases_of(rules):
        named = set()
        for rule in rules:
            p = rule.first("phase")
            if isinstance(p, Scalar) and p.lexical_form in PHASES:
                named.add(p.lexical_form)
            else:
                named.update(PHASES)  # rule without a phase applies to both
        return named

    if includes:
        return frozenset(phases_of(includes))
    if excludes:
        return frozenset(set(PHASES) - phases_of(excludes))
    return frozenset(PHASES)


def net_from_document(doc: Document, catalog: LayerCatalog | None = None) -> NetModel:
    """Build a NetModel from a parsed net document."""
    if doc.root.values("layers"):
        raise LegacyFormatUnsupported("legacy 'layers' (V1) blocks are not supported")
    layers: list[LayerNode] = []
    for value in doc.root.values("layer"):
        if not isinstance(value, Block):
            raise NotANetDocument("'layer' entry is not a block")
        name = value.scalar("name", "")
        type_name = value.scalar("type", "")
        bottoms = tuple(v.lexical_form for v in value.values("bottom")
                        if isinstance(v, Scalar))
        tops = tuple(v.lexical_form for v in value.values("top")
                     if isinstance(v, Scalar))
        layers.append(LayerNode(
            name=str(name),
            type_name=str(type_name),
            bottoms=bottoms,
            tops=tops,
            phases=_phases_from_block(value),
            params=value.without(*_BOOKKEEPING),
        ))
    name = doc.root.scalar("name", "")
    net = NetModel(net_name=str(name), layers=tuple(layers))
    return auto_layout(net)


def net_to_document(net: NetModel) -> Document:
    """Emit the net as a document; positions are not part of the prototxt."""
    entries: list[tuple[str, Scalar | Block]] = []
    if net.net_name:
        entries.append(("name", Scalar.of(net.net_name)))
    for layer in net.layers:
        layer_entries: list[tuple[str, Scalar | Block]] = [
            ("name", Scalar.of(layer.name)),
            ("type", Scalar.of(layer.type_name)),
        ]
        for b in layer.bottoms:
            layer_entries.append(("bottom", Scalar.of(b)))
        for t in layer.tops:
            layer_entries.append(("top", Scalar.of(t)))
        if layer.phases != frozenset(PHASES):
            for phase in PHASES:
                if phase in layer.phases:
                    rule = Block((("phase", Scalar.identifier(phase)),))
                    layer_entries.append(("include", rule))
        layer_entries.extend(layer.params.entries)
        entries.append(("layer", Block(tuple(layer_entries))))
    return Document(Block(tuple(entries)))


# ---------------------------------------------------------------------------
# Edges

def blob_edges(net: NetModel, phase: str | None = None) -> list[BlobEdge]:
    """Derive producer->consumer edges from blob names, in net order."""
    layers = [l for l in net.layers if phase is None or phase in l.phases]
    edges: list[BlobEdge] = []
    # latest producer of each blob as we walk in declaration order
    producer: dict[str, tuple[str, int]] = {}
    for layer in layers:
        for bi, blob in enumerate(layer.bottoms):
            if blob in producer:
                pname, ti = producer[blob]
                in_place = blob in layer.tops
                edges.append(BlobEdge((pname, ti), (layer.name, bi), blob, in_place))
        for ti, blob in enumerate(layer.tops):
            producer[blob] = (layer.name, ti)
    return edges


# ---------------------------------------------------------------------------
# Editing

def _fresh_name(net: NetModel, type_name: str) -> str:
    base = type_name.lower()
    k = 1
    while net.has_layer(f"{base}_{k}"):
        k += 1
    return f"{base}_{k}"


def add_layer(net: NetModel, type_name: str, name: str | None = None,
              position: tuple[float, float] | None = None,
              catalog: LayerCatalog | None = None) -> NetModel:
    if catalog is not None and catalog.find(type_name) is None:
        raise UnknownLayerType(type_name)
    if name is None:
        name = _fresh_name(net, type_name)
    elif net.has_layer(name):
        raise DuplicateLayerName(name)
    node = LayerNode(name=name, type_name=type_name, tops=(name,),
                     position=position or (0.0, 0.0))
    model = replace(net, layers=net.layers + (node,))
    if position is None:
        model = auto_layout(model)
    return model


def remove_layer(net: NetModel, name: str) -> NetModel:
    net.layer(name)  # raises NoSuchLayer
    layers = tuple(l for l in net.layers if l.name != name)
    return replace(net, layers=layers)


def rename_layer(net: NetModel, old: str, new: str) -> NetModel:
    layer = net.layer(old)
    if net.has_layer(new):
        raise DuplicateLayerName(new)
    return net.replace_layer(old, replace(layer, name=new))


def connect(net: NetModel, producer_layer: str, top_index: int,
            consumer_layer: str, bottom_index: int) -> NetModel:
    producer = net.layer(producer_layer)
    consumer = net.layer(consumer_layer)
    if not 0 <= top_index < len(producer.tops):
        raise IndexOutOfRange(f"{producer_layer}.top[{top_index}]")
    if not 0 <= bottom_index <= len(consumer.bottoms):
        raise IndexOutOfRange(f"{consumer_layer}.bottom[{bottom_index}]")
    blob = producer.tops[top_index]
    bottoms = list(consumer.bottoms)
    if bottom_index == len(bottoms):
        bottoms.append(blob)
    else:
        bottoms[bottom_index] = blob
    return net.replace_layer(consumer_layer, replace(consumer, bottoms=tuple(bottoms)))


def disconnect(net: NetModel, consumer_layer: str, bottom_index: int) -> NetModel:
    consumer = net.layer(consumer_layer)
    if not 0 <= bottom_index < len(consumer.bottoms):
        raise IndexOutOfRange(f"{consumer_layer}.bottom[{bottom_index}]")
    bottoms = list(consumer.bottoms)
    del bottoms[bottom_index]
    return net.replace_layer(consumer_layer, replace(consumer, bottoms=tuple(bottoms)))


# ---------------------------------------------------------------------------
# Validation

def validate_topology(net: NetModel, phase: str,
                      catalog: LayerCatalog | None = None) -> list[TopologyDiagnostic]:
    """Diagnostics for the layer subset active in one phase; [] iff trainable."""
    diagnostics: list[TopologyDiagnostic] = []
    active = [l for l in net.layers if phase in l.phases]

    seen: dict[str, int] = {}
    for l in net.layers:
        seen[l.name] = seen.get(l.name, 0) + 1
    for name, count in seen.items():
        if count > 1:
            diagnostics.append(TopologyDiagnostic(
                "DuplicateLayerName", (name,),
                f"layer name {name!r} used {count} times"))

    if catalog is not None:
        for l in net.layers:
            if catalog.find(l.type_name) is None:
                diagnostics.append(TopologyDiagnostic(
                    "UnknownLayerType", (l.name,),
                    f"layer {l.name!r} has unknown type {l.type_name!r}"))

    produced: dict[str, list[str]] = {}
    for l in active:
        for blob in l.tops:
            if blob not in l.bottoms:  # in-place production does not count twice
                produced.setdefault(blob, []).append(l.name)
    for blob, producers in produced.items():
        if len(producers) > 1:
            diagnostics.append(TopologyDiagnostic(
                "MultipleProducers", tuple(producers) + (blob,),
                f"blob {blob!r} produced by multiple layers: {', '.join(producers)}"))

    all_produced = {blob for l in active for blob in l.tops}
    for l in active:
        for blob in l.bottoms:
            if blob not in all_produced:
                diagnostics.append(TopologyDiagnostic(
                    "DanglingBottom", (l.name, blob),
                    f"layer {l.name!r} consumes blob {blob!r} which no active layer produces"))

    for cycle in _find_cycles(active):
        diagnostics.append(TopologyDiagnostic(
            "Cycle", tuple(cycle),
            f"layers form a dependency cycle: {' -> '.join(cycle)}"))

    return diagnostics


def _dependency_graph(layers) -> dict[str, set[str]]:
    """Layer-name adjacency (producer -> consumer), in-place edges contracted."""
    adj: dict[str, set[str]] = {l.name: set() for l in layers}
    producers: dict[str, list[str]] = {}
    for l in layers:
        for blob in l.tops:
            if blob not in l.bottoms:
                producers.setdefault(blob, []).append(l.name)
    for l in layers:
        for blob in l.bottoms:
            if blob in l.tops:
                continue  # in-place: no dependency edge onto itself
            for p in producers.get(blob, ()):
                if p != l.name:
                    adj[p].add(l.name)
    return adj


def _find_cycles(layers) -> list[list[str]]:
    """Strongly connected components of size > 1 (or self loops)."""
    adj = _dependency_graph(layers)
    index: dict[str, int] = {}
    lowlink: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    cycles: list[list[str]] = []

    def strongconnect(v: str) -> None:
        work = [(v, iter(sorted(adj[v])))]
        index[v] = lowlink[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        while work:
            node, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = lowlink[w] = counter[0]
                    counter[0] += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(adj[w]))))
                    advanced = True
                    break
                if w in on_stack:
                    lowlink[node] = min(lowlink[node], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
            if lowlink[node] == index[node]:
                component = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    component.append(w)
                    if w == node:
                        break
                if len(component) > 1 or node in adj[node]:
                    cycles.append(sorted(component))

    for name in adj:
        if name not in index:
            strongconnect(name)
    return cycles


# ---------------------------------------------------------------------------
# Layout

def auto_layout(net: NetModel) -> NetModel:
    """Longest-path layering plus barycenter ordering; deterministic."""
    if not net.layers:
        return net
    order = {l.name: i for i, l in enumerate(net.layers)}
    adj = _dependency_graph(net.layers)
    in_cycle: dict[str, list[str]] = {}
    for component in _find_cycles(net.layers):
        for name in component:
            in_cycle[name] = component

    # acyclic view: drop edges internal to a cycle component
    dag: dict[str, set[str]] = {n: set() for n in adj}
    preds: dict[str, set[str]] = {n: set() for n in adj}
    for src, dsts in adj.items():
        for dst in dsts:
            if in_cycle.get(src) is not None and in_cycle.get(src) is in_cycle.get(dst):
                continue
            dag[src].add(dst)
            preds[dst].add(src)

    # longest path from sources, processed in topological order
    rank: dict[str, int] = {}
    remaining = {n: len(p) for n, p in preds.items()}
    queue = sorted((n for n, c in remaining.items() if c == 0), key=order.get)
    while queue:
        node = queue.pop(0)
        rank.setdefault(node, 0)
        for dst in sorted(dag[node], key=order.get):
            rank[dst] = max(rank.get(dst, 0), rank[node] + 1)
            remaining[dst] -= 1
            if remaining[dst] == 0:
                queue.append(dst)
        queue.sort(key=order.get)
    for name in adj:
        rank.setdefault(name, 0)
    # members of one cycle share the rank of their first-declared member
    for component in _find_cycles(net.layers):
        first = min(component, key=order.get)
        for name in component:
            rank[name] = rank[first]

    ranks: dict[int, list[str]] = {}
    for name, r in rank.items():
        ranks.setdefault(r, []).append(name)
    for names in ranks.values():
        names.sort(key=order.get)

    # barycenter sweeps over predecessor x-order
    for _ in range(4):
        xpos = {}
        for names in ranks.values():
            for i, n in enumerate(names):
                xpos[n] = i
        for r in sorted(ranks)[1:]:
            names = ranks[r]
            def bary(n):
                ps = preds[n]
                if not ps:
                    return (xpos[n], order[n])
                return (sum(xpos[p] for p in ps) / len(ps), order[n])
            names.sort(key=bary)
            for i, n in enumerate(names):
                xpos[n] = i

    positions: dict[str, tuple[float, float]] = {}
    for r in sorted(ranks):
        for i, name in enumerate(ranks[r]):
            positions[name] = (i * NODE_SPACING, r * RANK_SPACING)

    layers = tuple(replace(l, position=positions[l.name]) for l in net.layers)
    return replace(net, layers=layers)


# ---------------------------------------------------------------------------
# Transfer learning and search

def freeze_layers(net: NetModel, selector) -> tuple[NetModel, list[str]]:
    """Set lr_mult 0 on selected layers; returns (model, warnings).

    selector: int (first k layers), str (name prefix), or list of names.
    """
    if isinstance(selector, int):
        names = [l.name for l in net.layers[:selector]]
    elif isinstance(selector, str):
        names = [l.name for l in net.layers if l.name.startswith(selector)]
    else:
        names = list(selector)
        for name in names:
            net.layer(name)  # raises NoSuchLayer

    warnings: list[str] = []
    model = net
    for name in names:
        layer = model.layer(name)
        count = LEARNABLE_BLOBS.get(layer.type_name, 0)
        if count == 0:
            warnings.append(f"layer {name!r} ({layer.type_name}) has no learnable "
                            "parameters; skipped")
            continue
        params = layer.params.without("param")
        frozen = Block((("lr_mult", Scalar.of(0)),))
        entries = tuple(("param", frozen) for _ in range(count)) + params.entries
        model = model.replace_layer(name, replace(layer, params=Block(entries)))
    return model, warnings


def search_layers(net: NetModel, query: str) -> list[str]:
    """Case-insensitive substring match over layer names and types."""
    q = query.lower()
    return [l.name for l in net.layers
            if q in l.name.lower() or q in l.type_name.lower()]
