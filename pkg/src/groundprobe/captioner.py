"""Image-conditioned caption generators sharing one GRU language model.

Four conditioning schemes are supported and differ only in where the image
feature vector enters the computation:

* ``INIT_INJECT``  -- projected image becomes the initial hidden state.
* ``PRE_INJECT``   -- projected image is consumed as the first RNN input,
  before any word; word embeddings follow.
* ``PAR_INJECT``   -- projected image is concatenated with the word embedding
  at every step.
* ``MERGE``        -- the RNN never sees the image; the projected image is
  concatenated with the hidden state just before the output layer.

The "multimodal vector" is the layer mixing image and prefix information:
the hidden state for the inject schemes, the concatenation for merge.

Two forward routes are provided: a plain numpy route (`forward_replay`,
`generate`, fast, no gradients) and an :class:`ExprGraph` route
(`build_replay_graph`, `build_loss_graph`) used wherever gradients are
needed. Both implement the same equations.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ExprGraph, ShapeError, as_tensor, sigmoid, stable_softmax

__all__ = [
    "UNK_ID",
    "START_ID",
    "END_ID",
    "ArchitectureKind",
    "ModelParams",
    "StepTrace",
    "GraphReplay",
    "CaptionerError",
    "CheckpointError",
    "gru_step",
    "image_projection",
    "forward_replay",
    "generate",
    "build_replay_graph",
    "build_loss_graph",
    "save_params",
    "load_params",
]

# Reserved token ids, fixed across every vocabulary.
UNK_ID = 0
START_ID = 1
END_ID = 2


class CaptionerError(ValueError):
    """Invalid replay/generation request (bad tokens, wrong dimensions)."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


class ArchitectureKind(enum.Enum):
    INIT_INJECT = "init"
    PRE_INJECT = "pre"
    PAR_INJECT = "par"
    MERGE = "merge"

    @property
    def tag(self) -> str:
        return self.value

    @classmethod
    def from_tag(cls, tag: str) -> "ArchitectureKind":
        for kind in cls:
            if kind.value == tag:
                return kind
        raise ValueError(f"unknown architecture tag {tag!r}; expected one of "
                         f"{[k.value for k in cls]}")


# Stable one-byte codes used in the checkpoint header.
_KIND_CODES = {
    ArchitectureKind.INIT_INJECT: 0,
    ArchitectureKind.PRE_INJECT: 1,
    ArchitectureKind.PAR_INJECT: 2,
    ArchitectureKind.MERGE: 3,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def projection_width(kind: ArchitectureKind, m: int, h: int) -> int:
    """Width of the projected image vector for the given scheme."""
    if kind in (ArchitectureKind.INIT_INJECT, ArchitectureKind.MERGE):
        return h
    return m


def input_width(kind: ArchitectureKind, m: int) -> int:
    """Width of the per-step RNN input for the given scheme."""
    return 2 * m if kind is ArchitectureKind.PAR_INJECT else m


def output_width(kind: ArchitectureKind, h: int) -> int:
    """Width of the vector fed to the output layer (the multimodal vector)."""
    return 2 * h if kind is ArchitectureKind.MERGE else h


@dataclass
class ModelParams:
    """All trainable weights for one architecture.

    Tensor shapes are fully determined by (kind, V, m, h, D); `tensors()`
    yields them in the declared order, which is also the checkpoint order.
    """

    kind: ArchitectureKind
    V: int
    m: int
    h: int
    D: int
    E: np.ndarray = field(repr=False)  # (V, m) word embeddings
    W_img: np.ndarray = field(repr=False)  # (p, D) image projection
    b_img: np.ndarray = field(repr=False)  # (p,)
    Wz: np.ndarray = field(repr=False)  # (h, x) update gate, input side
    Uz: np.ndarray = field(repr=False)  # (h, h) update gate, recurrent side
    bz: np.ndarray = field(repr=False)  # (h,)
    Wr: np.ndarray = field(repr=False)  # reset gate
    Ur: np.ndarray = field(repr=False)
    br: np.ndarray = field(repr=False)
    Wc: np.ndarray = field(repr=False)  # candidate state
    Uc: np.ndarray = field(repr=False)
    bc: np.ndarray = field(repr=False)
    W_out: np.ndarray = field(repr=False)  # (V, q) output layer
    b_out: np.ndarray = field(repr=False)  # (V,)

    _TENSOR_NAMES = (
        "E", "W_img", "b_img",
        "Wz", "Uz", "bz",
        "Wr", "Ur", "br",
        "Wc", "Uc", "bc",
        "W_out", "b_out",
    )

    @staticmethod
    def tensor_shapes(kind: ArchitectureKind, V: int, m: int, h: int, D: int):
        p = projection_width(kind, m, h)
        x = input_width(kind, m)
        q = output_width(kind, h)
        return {
            "E": (V, m),
            "W_img": (p, D), "b_img": (p,),
            "Wz": (h, x), "Uz": (h, h), "bz": (h,),
            "Wr": (h, x), "Ur": (h, h), "br": (h,),
            "Wc": (h, x), "Uc": (h, h), "bc": (h,),
            "W_out": (V, q), "b_out": (V,),
        }

    def tensors(self):
        """(name, array) pairs in declared order."""
        return [(name, getattr(self, name)) for name in self._TENSOR_NAMES]

    def validate(self):
        if self.V < 3:
            raise CaptionerError("vocabulary must include UNK, START and END")
        expected = self.tensor_shapes(self.kind, self.V, self.m, self.h, self.D)
        for name, arr in self.tensors():
            if arr.shape != expected[name]:
                raise ShapeError(f"params.{name}", arr.shape, expected[name])
            if not np.all(np.isfinite(arr)):
                raise CaptionerError(f"params.{name} contains non-finite values")

    def copy(self) -> "ModelParams":
        kwargs = {name: arr.copy() for name, arr in self.tensors()}
        return ModelParams(kind=self.kind, V=self.V, m=self.m, h=self.h, D=self.D, **kwargs)


@dataclass(frozen=True)
class StepTrace:
    """Per-timestep record of one teacher-forced prediction step."""

    input_token: int
    hidden: np.ndarray  # (h,)
    multimodal: np.ndarray  # (h,) inject, (2h,) merge
    logits: np.ndarray  # (V,)
    softmax: np.ndarray  # (V,)


def gru_step(params: ModelParams, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One GRU update: z, r gates then candidate, h' = (1-z)*h + z*c.

    The reset gate is applied to h before the recurrent candidate matrix.
    """
    xw = input_width(params.kind, params.m)
    x = as_tensor(x)
    h_prev = as_tensor(h_prev)
    if x.shape != (xw,):
        raise ShapeError("gru_step input", x.shape, (xw,))
    if h_prev.shape != (params.h,):
        raise ShapeError("gru_step state", h_prev.shape, (params.h,))
    z = sigmoid(params.Wz @ x + params.Uz @ h_prev + params.bz)
    r = sigmoid(params.Wr @ x + params.Ur @ h_prev + params.br)
    c = np.tanh(params.Wc @ x + params.Uc @ (r * h_prev) + params.bc)
    return (1.0 - z) * h_prev + z * c


def image_projection(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Affine projection of the raw image feature vector followed by tanh."""
    return np.tanh(params.W_img @ image + params.b_img)


def _check_replay_args(params: ModelParams, image: np.ndarray, tokens: Sequence[int]):
    if image.shape != (params.D,):
        raise ShapeError("image features", image.shape, (params.D,))
    if len(tokens) < 1:
        raise CaptionerError("token sequence must be non-empty")
    if tokens[0] != START_ID:
        raise CaptionerError(f"token sequence must begin with START (id {START_ID}), got {tokens[0]}")
    for t in tokens:
        if not 0 <= int(t) < params.V:
            raise CaptionerError(f"unknown token id {t} (vocabulary size {params.V})")


def forward_replay(
    kind: ArchitectureKind,
    params: ModelParams,
    image,
    tokens: Sequence[int],
) -> list[StepTrace]:
    """Teacher-forced replay of `tokens`, one StepTrace per prediction step.

    `tokens` must begin with START; the final token only serves as a target,
    so a full caption [START, w0..wL-1, END] yields L+1 traces, where trace t
    consumed tokens[t] and its softmax scores the prediction of tokens[t+1].
    For PRE_INJECT the projected image is consumed in an extra leading RNN
    step that produces no trace.
    """
    image = as_tensor(image)
    _check_replay_args(params, image, tokens)
    proj = image_projection(params, image)
    par = kind is ArchitectureKind.PAR_INJECT
    merge = kind is ArchitectureKind.MERGE

    if kind is ArchitectureKind.INIT_INJECT:
        hid = proj
    else:
        hid = np.zeros(params.h)
        if kind is ArchitectureKind.PRE_INJECT:
            hid = gru_step(params, proj, hid)

    traces = []
    for t in range(len(tokens) - 1):
        tok = int(tokens[t])
        e = params.E[tok]
        x = np.concatenate([e, proj]) if par else e
        hid = gru_step(params, x, hid)
        mm = np.concatenate([hid, proj]) if merge else hid
        logits = params.W_out @ mm + params.b_out
        traces.append(StepTrace(tok, hid, mm, logits, stable_softmax(logits)))
    return traces


def generate(
    kind: ArchitectureKind,
    params: ModelParams,
    image,
    max_len: int,
) -> list[int]:
    """Greedy argmax decoding from START until END or `max_len` tokens.

    The returned sequence excludes START and includes END when produced.
    Argmax ties resolve to the lowest token id.
    """
    if max_len < 1:
        raise CaptionerError(f"max_len must be >= 1, got {max_len}")
    image = as_tensor(image)
    _check_replay_args(params, image, [START_ID])
    proj = image_projection(params, image)
    par = kind is ArchitectureKind.PAR_INJECT
    merge = kind is ArchitectureKind.MERGE

    if kind is ArchitectureKind.INIT_INJECT:
        hid = proj
    else:
        hid = np.zeros(params.h)
        if kind is ArchitectureKind.PRE_INJECT:
            hid = gru_step(params, proj, hid)

    out: list[int] = []
    tok = START_ID
    for _ in range(max_len):
        e = params.E[tok]
        x = np.concatenate([e, proj]) if par else e
        hid = gru_step(params, x, hid)
        mm = np.concatenate([hid, proj]) if merge else hid
        logits = params.W_out @ mm + params.b_out
        tok = int(np.argmax(logits))  # np.argmax returns the first (lowest) index on ties
        out.append(tok)
        if tok == END_ID:
            break
    return out


@dataclass
class GraphReplay:
    """Expression-graph form of a teacher-forced replay.

    Node-id handles into `graph`; `embeds[t]` is the embedding output of the
    word consumed at prediction step t, `probs[t]` the one-element node
    holding p(tokens[t+1]).
    """

    graph: ExprGraph
    image: int
    params: dict[str, int]
    embeds: list[int]
    hiddens: list[int]
    multimodal: list[int]
    logits: list[int]
    softmax: list[int]
    probs: list[int]
    targets: list[int]


def _gru_graph(g: ExprGraph, pn: dict[str, int], x: int, h: int) -> int:
    z = g.op("sigmoid", g.op("add", g.op("add", g.op("matvec", pn["Wz"], x),
                                         g.op("matvec", pn["Uz"], h)), pn["bz"]))
    r = g.op("sigmoid", g.op("add", g.op("add", g.op("matvec", pn["Wr"], x),
                                         g.op("matvec", pn["Ur"], h)), pn["br"]))
    rh = g.op("mul", r, h)
    c = g.op("tanh", g.op("add", g.op("add", g.op("matvec", pn["Wc"], x),
                                      g.op("matvec", pn["Uc"], rh)), pn["bc"]))
    # h + z*(c - h) == (1-z)*h + z*c
    delta = g.op("add", c, g.op("neg", h))
    return g.op("add", h, g.op("mul", z, delta))


def build_replay_graph(
    kind: ArchitectureKind,
    params: ModelParams,
    image,
    tokens: Sequence[int],
) -> GraphReplay:
    """Differentiable teacher-forced replay over an ExprGraph.

    Parameters and the raw image enter as input nodes, so `backward` from any
    probability node yields gradients w.r.t. all of them, the per-step
    embedding outputs, and every intermediate vector.
    """
    image = as_tensor(image)
    _check_replay_args(params, image, tokens)
    if len(tokens) < 2:
        raise CaptionerError("replay graph needs at least one prediction step (two tokens)")

    g = ExprGraph()
    pn = {name: g.input(arr) for name, arr in params.tensors()}
    img = g.input(image)
    proj = g.op("tanh", g.op("add", g.op("matvec", pn["W_img"], img), pn["b_img"]))
    par = kind is ArchitectureKind.PAR_INJECT
    merge = kind is ArchitectureKind.MERGE

    if kind is ArchitectureKind.INIT_INJECT:
        h = proj
    else:
        h = g.input(np.zeros(params.h))
        if kind is ArchitectureKind.PRE_INJECT:
            h = _gru_graph(g, pn, proj, h)

    embeds, hiddens, multimodal, logit_ids, softmax_ids, probs = [], [], [], [], [], []
    targets = [int(t) for t in tokens[1:]]
    for t in range(len(tokens) - 1):
        e = g.op("embed", pn["E"], row=int(tokens[t]))
        x = g.op("concat", e, proj) if par else e
        h = _gru_graph(g, pn, x, h)
        mm = g.op("concat", h, proj) if merge else h
        lo = g.op("add", g.op("matvec", pn["W_out"], mm), pn["b_out"])
        sm = g.op("softmax", lo)
        pk = g.op("pick", sm, index=targets[t])
        embeds.append(e)
        hiddens.append(h)
        multimodal.append(mm)
        logit_ids.append(lo)
        softmax_ids.append(sm)
        probs.append(pk)

    return GraphReplay(g, img, pn, embeds, hiddens, multimodal, logit_ids, softmax_ids, probs, targets)


def build_loss_graph(
    kind: ArchitectureKind,
    params: ModelParams,
    image,
    tokens: Sequence[int],
) -> tuple[GraphReplay, int]:
    """Replay graph plus a scalar node holding sum_t -log p(tokens[t+1])."""
    replay = build_replay_graph(kind, params, image, tokens)
    g = replay.graph
    nlls = [g.op("neg", g.op("log", pk)) for pk in replay.probs]
    loss = g.op("sum", g.op("concat", *nlls))
    return replay, loss


# --- checkpoint serialization -------------------------------------------------
#
# Little-endian binary layout:
#   magic "GPRB" | version u32 | kind u8 | V u32 | m u32 | h u32 | D u32
# followed by the tensors of ModelParams.tensors() in declared order as raw
# float64 values.

CHECKPOINT_MAGIC = b"GPRB"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIBIIII")


def save_params(params: ModelParams, path):
    params.validate()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                              _KIND_CODES[params.kind],
                              params.V, params.m, params.h, params.D))
        for _, arr in params.tensors():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, kind_code, V, m, h, D = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} "
                              f"(expected {CHECKPOINT_VERSION})")
    if kind_code not in _CODE_KINDS:
        raise CheckpointError(f"{path}: unknown architecture code {kind_code}")
    kind = _CODE_KINDS[kind_code]
    if min(V, m, h, D) <= 0:
        raise CheckpointError(f"{path}: invalid dimensions V={V} m={m} h={h} D={D}")

    shapes = ModelParams.tensor_shapes(kind, V, m, h, D)
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) < expected:
        raise CheckpointError(f"{path}: truncated tensor data "
                              f"({len(blob)} bytes, expected {expected})")
    if len(blob) > expected:
        raise CheckpointError(f"{path}: {len(blob) - expected} trailing bytes "
                              "beyond declared dimensions")

    offset = _HEADER.size
    arrays = {}
    for name in ModelParams._TENSOR_NAMES:
        shape = shapes[name]
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        arrays[name] = arr.reshape(shape)
        offset += 8 * count
    params = ModelParams(kind=kind, V=V, m=m, h=h, D=D, **arrays)
    try:
        params.validate()
    except (ShapeError, CaptionerError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return params
