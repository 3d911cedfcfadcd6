"""Cell-based over-parameterized network and genotype machinery.

A cell is a DAG over two input nodes and four intermediate nodes; each of its
14 edges carries the current candidate-op set mixed by softmax(alpha) under
partial channel connection: a per-forward mask selects ceil(C/divisor)
channels, ops run on the zero-masked full-width tensor so their parameters are
shared verbatim with sampled (single-op, all-channel) execution, the mixture
output on the selected positions is concatenated with the bypassed channels
and a fixed channel shuffle interleaves the two blocks.

Architecture parameters are shared across all cells of the same kind, so the
search bookkeeping sees 14 normal plus 14 reduction edges regardless of depth.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import SearchError, ShapeError
from .ops import (
    PRIMITIVES,
    BatchNorm,
    Conv,
    FactorizedReduce,
    Param,
    ReLUConvBN,
    Sequential,
    build_op,
    collect_kernels,
    collect_params,
    walk_arrays,
)
from .util import make_rng

NODES = 4
EDGES_PER_CELL = sum(j + 1 for j in range(1, NODES + 1))  # 14
CELL_MULTIPLIER = NODES  # output concatenates the 4 intermediate nodes


def edge_layout():
    """(to_node, from_node) per edge index; from: -1, 0 are the cell inputs."""
    layout = []
    for j in range(1, NODES + 1):
        for state in range(j + 1):
            layout.append((j, state - 1))
    return layout


EDGE_LAYOUT = edge_layout()


def reduction_positions(n_cells):
    """Reduction cells sit at the 2nd and 4th slots of a 6-cell stack; for
    shallower stacks keep one reduction (none for a single cell)."""
    if n_cells >= 3:
        return {-(-n_cells // 3) - 1, -(-2 * n_cells // 3) - 1}
    if n_cells == 2:
        return {1}
    return set()


class AlphaParam:
    """Architecture weights for one edge, shared by every cell of its kind."""

    def __init__(self, count, dtype=np.float32):
        self.values = np.zeros(count, dtype=dtype)
        self.grad = np.zeros(count, dtype=dtype)

    def weights(self):
        return tensor.softmax(self.values)

    def prune(self, index):
        self.values = np.delete(self.values, index)
        self.grad = np.delete(self.grad, index)

    def zero_grad(self):
        self.grad[...] = 0.0


def _shuffle_perm(channels, divisor):
    if divisor <= 1 or channels % divisor:
        return None
    return np.arange(channels).reshape(divisor, channels // divisor).T.ravel()


class MixedEdge:
    """One candidate-set edge: softmax mixture with partial channel connection."""

    def __init__(self, channels, stride, divisor, alpha, ops):
        self.channels = channels
        self.stride = stride
        self.divisor = divisor
        self.alpha = alpha
        self.ops = list(ops)
        self._cache = None
        self._sampled = None

    @property
    def kinds(self):
        return [op.kind for op in self.ops]

    def op_index(self, kind):
        try:
            return self.kinds.index(kind)
        except ValueError:
            raise SearchError(f"op {kind!r} is not on this edge (have {self.kinds})") from None

    def forward(self, x, training, rng):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"edge expects {self.channels} channels, got {c}")
        m = -(-c // self.divisor)
        if self.divisor == 1:
            sel = np.arange(c)
            byp = np.arange(0)
        else:
            order = rng.permutation(c)
            sel = np.sort(order[:m])
            byp = np.sort(order[m:])
        mask = np.zeros(c, dtype=x.dtype)
        mask[sel] = 1.0
        xm = x * mask[None, :, None, None]
        outs_sel = []
        weights = self.alpha.weights()
        mix = None
        for k, op in enumerate(self.ops):
            o_sel = np.ascontiguousarray(op.forward(xm, training)[:, sel])
            outs_sel.append(o_sel)
            contrib = o_sel * x.dtype.type(weights[k])
            mix = contrib if mix is None else mix + contrib
        byp_cache = None
        if byp.size:
            x_byp = np.ascontiguousarray(x[:, byp])
            if self.stride == 2:
                byp_cache = x_byp
                byp_out = tensor.pool2d(x_byp, "avg", 2)
            else:
                byp_out = x_byp
            z = np.concatenate([mix, byp_out], axis=1)
        else:
            z = mix
        perm = _shuffle_perm(c, self.divisor)
        y = np.ascontiguousarray(z[:, perm]) if perm is not None else z
        self._cache = (x.shape, mask, sel, byp, outs_sel, weights, perm, byp_cache)
        return y

    def backward(self, grad_out):
        if self._cache is None:
            raise SearchError("mixed edge backward before forward")
        x_shape, mask, sel, byp, outs_sel, weights, perm, byp_cache = self._cache
        self._cache = None
        if perm is not None:
            gz = np.ascontiguousarray(grad_out[:, np.argsort(perm)])
        else:
            gz = grad_out
        m = sel.size
        g_mix = np.ascontiguousarray(gz[:, :m])
        dloss_dw = np.array([np.vdot(g_mix, o) for o in outs_sel], dtype=np.float64)
        self.alpha.grad += tensor.softmax_backward(weights, dloss_dw).astype(self.alpha.grad.dtype)
        gx = np.zeros(x_shape, dtype=grad_out.dtype)
        n, c = x_shape[0], x_shape[1]
        for k, op in enumerate(self.ops):
            ho, wo = g_mix.shape[2], g_mix.shape[3]
            g_full = np.zeros((n, c, ho, wo), dtype=grad_out.dtype)
            g_full[:, sel] = g_mix * grad_out.dtype.type(weights[k])
            gx += op.backward(g_full)
        gx *= mask[None, :, None, None]
        if byp.size:
            g_byp = np.ascontiguousarray(gz[:, m:])
            if self.stride == 2:
                gx[:, byp] += tensor.pool2d_backward(byp_cache, g_byp, "avg", 2)
            else:
                gx[:, byp] += g_byp
        return gx

    def forward_sampled(self, x, kind, training):
        idx = self.op_index(kind)
        self._sampled = idx
        return self.ops[idx].forward(x, training)

    def backward_sampled(self, grad_out):
        if self._sampled is None:
            raise SearchError("sampled backward before forward")
        idx, self._sampled = self._sampled, None
        return self.ops[idx].backward(grad_out)

    def prune_local(self, kind):
        if len(self.ops) <= 1:
            raise SearchError("cannot prune the last op of an edge")
        self.ops.pop(self.op_index(kind))


class Cell:
    def __init__(self, c_pp, c_p, c, reduction, reduction_prev, alpha_group, cfg, rng):
        self.reduction = reduction
        self.kind = "reduce" if reduction else "normal"
        self.channels = c
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, rng, dtype=cfg.dtype)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, rng, binarized=cfg.binarize_preprocess,
                                   theta=cfg.theta, dtype=cfg.dtype)
        self.pre1 = ReLUConvBN(c_p, c, rng, binarized=cfg.binarize_preprocess,
                               theta=cfg.theta, dtype=cfg.dtype)
        self.edges = []
        for j, frm in EDGE_LAYOUT:
            stride = 2 if reduction and frm < 1 else 1
            ops = [
                build_op(kind, c, stride, cfg.precision, rng, bin_mode=cfg.bin_mode,
                         theta=cfg.theta, dtype=cfg.dtype, fp_pointwise=cfg.fp_pointwise)
                for kind in cfg.op_set
            ]
            self.edges.append(MixedEdge(c, stride, cfg.divisor, alpha_group[len(self.edges)], ops))

    def forward(self, s0, s1, training, rng=None, arch=None):
        states = [self.pre0.forward(s0, training), self.pre1.forward(s1, training)]
        e = 0
        for j in range(1, NODES + 1):
            acc = None
            for state_idx in range(j + 1):
                edge = self.edges[e]
                if arch is None:
                    y = edge.forward(states[state_idx], training, rng)
                else:
                    y = edge.forward_sampled(states[state_idx], arch[(self.kind, e)], training)
                acc = y if acc is None else acc + y
                e += 1
            states.append(acc)
        self._state_shapes = [s.shape for s in states]
        return np.concatenate(states[2:], axis=1)

    def backward(self, grad_out, arch=None):
        shapes = self._state_shapes
        node_grads = [np.zeros(shape, dtype=grad_out.dtype) for shape in shapes]
        c = self.channels
        for j in range(NODES):
            node_grads[2 + j] += grad_out[:, j * c:(j + 1) * c]
        e = EDGES_PER_CELL - 1
        for j in range(NODES, 0, -1):
            g_node = node_grads[1 + j]
            for state_idx in range(j, -1, -1):
                edge = self.edges[e]
                if arch is None:
                    gx = edge.backward(g_node)
                else:
                    gx = edge.backward_sampled(g_node)
                node_grads[state_idx] += gx
                e -= 1
        gs1 = self.pre1.backward(node_grads[1])
        gs0 = self.pre0.backward(node_grads[0])
        return gs0, gs1


@dataclass
class NetworkConfig:
    classes: int
    in_channels: int = 3
    init_channels: int = 16
    cells: int = 6
    op_set: tuple = PRIMITIVES
    precision: str = "bnn"
    bin_mode: str = "xnor"
    theta: float = 1e-4
    divisor: int = 2
    stem_multiplier: int = 3
    fp_pointwise: bool = False
    binarize_preprocess: bool = False
    seed: int = 0
    dtype: type = np.float32


class _Backbone:
    """Shared stem / cell-chain / classifier scaffolding."""

    def _build_stem(self, cfg, rng):
        c_stem = cfg.init_channels * cfg.stem_multiplier
        self.stem = Sequential([
            Conv(cfg.in_channels, c_stem, 3, rng, padding=1, dtype=cfg.dtype),
            BatchNorm(c_stem, dtype=cfg.dtype),
        ])
        return c_stem

    def _build_classifier(self, cfg, c_last, rng):
        scale = np.sqrt(1.0 / c_last)
        self.fc_w = Param((rng.standard_normal((cfg.classes, c_last)) * scale).astype(cfg.dtype))
        self.fc_b = Param(np.zeros(cfg.classes, dtype=cfg.dtype))

    def forward(self, x, training, arch=None):
        s = self.stem.forward(x, training)
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, self._cell_forward(cell, s0, s1, training, arch)
        self._gap_hw = s1.shape[2:]
        self._feats = tensor.global_avg_pool(s1)
        return tensor.linear(self._feats, self.fc_w.value, self.fc_b.value)

    def backward(self, grad_logits, arch=None):
        g_feat, gw, gb = tensor.linear_backward(self._feats, self.fc_w.value, grad_logits)
        self.fc_w.grad += gw
        self.fc_b.grad += gb
        g_last = tensor.global_avg_pool_backward(g_feat, *self._gap_hw)
        n_cells = len(self.cells)
        slot = {n_cells + 1: g_last}
        for i in range(n_cells - 1, -1, -1):
            g_out = slot.pop(i + 2, None)
            if g_out is None:
                continue
            gs0, gs1 = self._cell_backward(self.cells[i], g_out, arch)
            for idx, g in ((i, gs0), (i + 1, gs1)):
                slot[idx] = slot[idx] + g if idx in slot else g
        g_stem = slot.get(0, 0) + slot.get(1, 0)
        self.stem.backward(g_stem)

    def named_arrays(self):
        yield from walk_arrays(self.stem, "stem.")
        for i, cell in enumerate(self.cells):
            yield from walk_arrays(cell.pre0, f"cells.{i}.pre0.")
            yield from walk_arrays(cell.pre1, f"cells.{i}.pre1.")
            yield from self._cell_extra_arrays(i, cell)
        yield "fc.w", "param", self.fc_w
        yield "fc.b", "param", self.fc_b

    def num_weights(self):
        total = 0
        for _, kind, obj in self.named_arrays():
            if kind == "param":
                total += obj.value.size
            elif kind == "kernel":
                total += obj.x.size
        return total

    def _trainable_modules(self, arch):
        raise NotImplementedError

    def trainable(self, arch=None):
        """(params, kernels) of the architecture that is actually executed."""
        modules = [self.stem]
        modules.extend(self._trainable_modules(arch))
        params = [p for mod in modules for p in collect_params(mod)]
        params += [self.fc_w, self.fc_b]
        kernels = [k for mod in modules for k in collect_kernels(mod)]
        return params, kernels


class Network(_Backbone):
    """The searchable supernet."""

    def __init__(self, cfg):
        if cfg.precision not in ("full", "bnn", "one_bit"):
            raise ShapeError(f"unknown precision {cfg.precision!r}")
        self.cfg = cfg
        rng = make_rng(cfg.seed, 1)
        self.mask_rng = make_rng(cfg.seed, 2)
        c_stem = self._build_stem(cfg, rng)
        reductions = reduction_positions(cfg.cells)
        self.cell_kinds = []
        if any(i not in reductions for i in range(cfg.cells)):
            self.cell_kinds.append("normal")
        if reductions:
            self.cell_kinds.append("reduce")
        self.alpha = {
            kind: [AlphaParam(len(cfg.op_set), dtype=cfg.dtype) for _ in range(EDGES_PER_CELL)]
            for kind in self.cell_kinds
        }
        self.cells = []
        c_pp, c_p, c_node = c_stem, c_stem, cfg.init_channels
        reduction_prev = False
        for i in range(cfg.cells):
            reduction = i in reductions
            if reduction:
                c_node *= 2
            kind = "reduce" if reduction else "normal"
            cell = Cell(c_pp, c_p, c_node, reduction, reduction_prev, self.alpha[kind], cfg, rng)
            self.cells.append(cell)
            c_pp, c_p = c_p, CELL_MULTIPLIER * c_node
            reduction_prev = reduction
        self._build_classifier(cfg, c_p, rng)

    def _cell_forward(self, cell, s0, s1, training, arch):
        return cell.forward(s0, s1, training, rng=self.mask_rng, arch=arch)

    def _cell_backward(self, cell, grad_out, arch):
        return cell.backward(grad_out, arch)

    def _cell_extra_arrays(self, i, cell):
        for e, edge in enumerate(cell.edges):
            for op in edge.ops:
                yield from op.arrays(f"cells.{i}.edges.{e}.{op.kind}.")

    def _trainable_modules(self, arch):
        modules = []
        for cell in self.cells:
            modules += [cell.pre0, cell.pre1]
            for e, edge in enumerate(cell.edges):
                if arch is None:
                    modules += [op.module for op in edge.ops]
                else:
                    modules.append(edge.ops[edge.op_index(arch[(cell.kind, e)])].module)
        return modules

    def named_arrays(self):
        yield from super().named_arrays()
        for kind in self.cell_kinds:
            for e, alpha in enumerate(self.alpha[kind]):
                yield f"alpha.{kind}.{e}", "buffer", alpha.values

    def edge_keys(self):
        return [(kind, e) for kind in self.cell_kinds for e in range(EDGES_PER_CELL)]

    def edge_kinds(self, key):
        kind, e = key
        for cell in self.cells:
            if cell.kind == kind:
                return list(cell.edges[e].kinds)
        raise SearchError(f"no cell of kind {kind!r}")

    def alpha_params(self):
        return [a for kind in self.cell_kinds for a in self.alpha[kind]]

    def alpha_of(self, key):
        return self.alpha[key[0]][key[1]]

    def prune(self, key, op_kind):
        kind, e = key
        idx = None
        for cell in self.cells:
            if cell.kind == kind:
                idx = cell.edges[e].op_index(op_kind)
                cell.edges[e].prune_local(op_kind)
        if idx is None:
            raise SearchError(f"no cell of kind {kind!r}")
        self.alpha[kind][e].prune(idx)

    def log_space_size(self):
        """Natural-log size of the per-kind edge spaces: sum_e ln K_e."""
        out = {}
        for kind in self.cell_kinds:
            counts = [len(self.edge_kinds((kind, e))) for e in range(EDGES_PER_CELL)]
            out[kind] = float(sum(np.log(k) for k in counts))
        return out


def derive_genotype(network):
    """Discrete architecture from a fully pruned supernet: per node, keep the
    two highest-alpha incoming edges among non-'none' survivors."""
    cfg = network.cfg
    per_kind = {"normal": [], "reduce": []}
    for kind in network.cell_kinds:
        entries = []
        for j in range(1, NODES + 1):
            incoming = []
            for e, (to, frm) in enumerate(EDGE_LAYOUT):
                if to != j:
                    continue
                kinds = network.edge_kinds((kind, e))
                if len(kinds) != 1:
                    raise SearchError(f"edge ({kind},{e}) still has {len(kinds)} ops")
                alpha_val = float(network.alpha[kind][e].values[0])
                incoming.append((alpha_val, e, frm, kinds[0]))
            survivors = [c for c in incoming if c[3] != "none"]
            survivors.sort(key=lambda c: (-c[0], c[1]))
            chosen = survivors[:2]
            if len(chosen) < 2:
                warnings.warn(
                    f"node {j} of {kind} cell has {len(chosen)} non-'none' inputs; "
                    "filling with skip connections"
                )
                fillers = [c for c in incoming if c[3] == "none"]
                fillers.sort(key=lambda c: (-c[0], c[1]))
                for c in fillers[:2 - len(chosen)]:
                    chosen.append((c[0], c[1], c[2], "skip_connect"))
            for _, _, frm, op in sorted(chosen, key=lambda c: c[2]):
                entries.append((op, frm, j))
        per_kind[kind] = entries
    meta = {
        "precision": cfg.precision,
        "bin_mode": cfg.bin_mode,
        "init_channels": cfg.init_channels,
        "divisor": cfg.divisor,
        "seed": cfg.seed,
    }
    return Genotype(normal=per_kind["normal"], reduce=per_kind["reduce"], meta=meta)


@dataclass
class Genotype:
    normal: list
    reduce: list
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "version": 1,
            "normal": [[op, frm, to] for op, frm, to in self.normal],
            "reduce": [[op, frm, to] for op, frm, to in self.reduce],
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != 1:
            raise ShapeError(f"unsupported genotype version {data.get('version')!r}")
        normal = [(op, int(frm), int(to)) for op, frm, to in data["normal"]]
        reduce_ = [(op, int(frm), int(to)) for op, frm, to in data["reduce"]]
        for op, frm, to in normal + reduce_:
            if op not in PRIMITIVES:
                raise ShapeError(f"unknown op {op!r} in genotype")
            if not (-1 <= frm < to <= NODES):
                raise ShapeError(f"invalid edge {frm}->{to} in genotype")
        return cls(normal=normal, reduce=reduce_, meta=dict(data.get("meta", {})))


class DerivedCell:
    """Cell instantiated from a genotype: each node sums its two chosen ops."""

    def __init__(self, entries, c_pp, c_p, c, reduction, reduction_prev, cfg, rng):
        self.reduction = reduction
        self.channels = c
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, rng, dtype=cfg.dtype)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, rng, binarized=cfg.binarize_preprocess,
                                   theta=cfg.theta, dtype=cfg.dtype)
        self.pre1 = ReLUConvBN(c_p, c, rng, binarized=cfg.binarize_preprocess,
                               theta=cfg.theta, dtype=cfg.dtype)
        self.node_inputs = {j: [] for j in range(1, NODES + 1)}
        for op_kind, frm, to in entries:
            stride = 2 if reduction and frm < 1 else 1
            op = build_op(op_kind, c, stride, cfg.precision, rng, bin_mode=cfg.bin_mode,
                          theta=cfg.theta, dtype=cfg.dtype, fp_pointwise=cfg.fp_pointwise)
            self.node_inputs[to].append((frm + 1, op))

    def forward(self, s0, s1, training):
        states = [self.pre0.forward(s0, training), self.pre1.forward(s1, training)]
        for j in range(1, NODES + 1):
            acc = None
            for state_idx, op in self.node_inputs[j]:
                y = op.forward(states[state_idx], training)
                acc = y if acc is None else acc + y
            if acc is None:
                ref = states[1]
                hw = (-(-ref.shape[2] // (2 if self.reduction else 1)),
                      -(-ref.shape[3] // (2 if self.reduction else 1)))
                acc = np.zeros((ref.shape[0], self.channels) + hw, dtype=ref.dtype)
            states.append(acc)
        self._state_shapes = [s.shape for s in states]
        return np.concatenate(states[2:], axis=1)

    def backward(self, grad_out):
        shapes = self._state_shapes
        node_grads = [np.zeros(shape, dtype=grad_out.dtype) for shape in shapes]
        c = self.channels
        for j in range(NODES):
            node_grads[2 + j] += grad_out[:, j * c:(j + 1) * c]
        for j in range(NODES, 0, -1):
            for state_idx, op in reversed(self.node_inputs[j]):
                node_grads[state_idx] += op.backward(node_grads[1 + j])
        gs1 = self.pre1.backward(node_grads[1])
        gs0 = self.pre0.backward(node_grads[0])
        return gs0, gs1

    def ops(self):
        for j in range(1, NODES + 1):
            for state_idx, op in self.node_inputs[j]:
                yield j, state_idx, op


class DerivedNetwork(_Backbone):
    """Discrete network stacked from a genotype."""

    def __init__(self, genotype, cfg):
        self.cfg = cfg
        self.genotype = genotype
        rng = make_rng(cfg.seed, 3)
        c_stem = self._build_stem(cfg, rng)
        reductions = reduction_positions(cfg.cells)
        self.cells = []
        c_pp, c_p, c_node = c_stem, c_stem, cfg.init_channels
        reduction_prev = False
        for i in range(cfg.cells):
            reduction = i in reductions
            if reduction:
                c_node *= 2
            entries = genotype.reduce if reduction else genotype.normal
            cell = DerivedCell(entries, c_pp, c_p, c_node, reduction, reduction_prev, cfg, rng)
            self.cells.append(cell)
            c_pp, c_p = c_p, CELL_MULTIPLIER * c_node
            reduction_prev = reduction
        self._build_classifier(cfg, c_p, rng)

    def _cell_forward(self, cell, s0, s1, training, arch):
        return cell.forward(s0, s1, training)

    def _cell_backward(self, cell, grad_out, arch):
        return cell.backward(grad_out)

    def _cell_extra_arrays(self, i, cell):
        for j, state_idx, op in cell.ops():
            yield from op.arrays(f"cells.{i}.n{j}.s{state_idx}.{op.kind}.")

    def _trainable_modules(self, arch):
        modules = []
        for cell in self.cells:
            modules += [cell.pre0, cell.pre1]
            modules += [op.module for _, _, op in cell.ops()]
        return modules

    def alpha_params(self):
        return []
