"""Forecaster forward pass: two-layer multi-head graph attention, columnwise
max-pooling into a graph embedding, a GRU encoder over the embedding
sequence, and two MLP heads (transmission/recovery rates and per-day case
increments).

All builders work on autodiff Tensors so the same code serves training and
inference; the public functions wrap them with plain-ndarray interfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tape, Tensor
from .graph import day_feature_matrix, feature_window

ATTENTION_MODES = ("masked", "dense", "weighted")
MODEL_MODES = ("full", "stan-pc", "stan-graph")


@dataclass
class GatLayerParams:
    """Per-head transform matrices (F_out x F_in) and attention rows (2*F_out,)."""

    w_z: list[np.ndarray]
    w_a: list[np.ndarray]

    def __post_init__(self):
        if not self.w_z or len(self.w_z) != len(self.w_a):
            raise ContractError("attention layer needs matching head lists")
        f_out, f_in = self.w_z[0].shape
        for wz, wa in zip(self.w_z, self.w_a):
            if wz.shape != (f_out, f_in) or wa.shape != (2 * f_out,):
                raise DimensionError(
                    f"head shapes {wz.shape}/{wa.shape} disagree with ({f_out},{f_in})"
                )

    @property
    def n_heads(self) -> int:
        return len(self.w_z)

    @property
    def f_in(self) -> int:
        return self.w_z[0].shape[1]

    @property
    def f_out(self) -> int:
        return self.w_z[0].shape[0]


@dataclass
class GruParams:
    """Update/reset/candidate gate weights for one GRU cell."""

    update_w: np.ndarray
    update_u: np.ndarray
    update_b: np.ndarray
    reset_w: np.ndarray
    reset_u: np.ndarray
    reset_b: np.ndarray
    cand_w: np.ndarray
    cand_u: np.ndarray
    cand_b: np.ndarray

    def __post_init__(self):
        h, f = self.update_w.shape
        for name in ("update", "reset", "cand"):
            w = getattr(self, f"{name}_w")
            u = getattr(self, f"{name}_u")
            b = getattr(self, f"{name}_b")
            if w.shape != (h, f) or u.shape != (h, h) or b.shape != (h,):
                raise DimensionError(f"gru {name} gate shapes inconsistent")

    @property
    def hidden(self) -> int:
        return self.update_w.shape[0]

    @property
    def input_size(self) -> int:
        return self.update_w.shape[1]


@dataclass
class HeadParams:
    """Rate head (2 outputs, sigmoid) and increment head (2*L_p outputs)."""

    rate_w1: np.ndarray
    rate_b1: np.ndarray
    rate_w2: np.ndarray
    rate_b2: np.ndarray
    inc_w1: np.ndarray
    inc_b1: np.ndarray
    inc_w2: np.ndarray
    inc_b2: np.ndarray

    def __post_init__(self):
        if self.rate_w2.shape[0] != 2:
            raise DimensionError("rate head must emit exactly (beta, gamma)")
        if self.inc_w2.shape[0] % 2 != 0:
            raise DimensionError("increment head width must be 2 * horizon")

    @property
    def horizon(self) -> int:
        return self.inc_w2.shape[0] // 2


@dataclass
class StanParams:
    """All learnable tensors for one location's model."""

    location_id: str
    gat1: GatLayerParams | None
    gat2: GatLayerParams | None
    gru: GruParams
    heads: HeadParams

    def __post_init__(self):
        if (self.gat1 is None) != (self.gat2 is None):
            raise ContractError("gat layers must both be present or both absent")
        if self.gat1 is not None and self.gat1.f_out != self.gat2.f_in:
            raise DimensionError("gat1 output width must match gat2 input width")

    def flatten(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for lname, layer in (("gat1", self.gat1), ("gat2", self.gat2)):
            if layer is None:
                continue
            for k in range(layer.n_heads):
                out[f"{lname}/h{k}/w_z"] = layer.w_z[k]
                out[f"{lname}/h{k}/w_a"] = layer.w_a[k]
        for gate in ("update", "reset", "cand"):
            for part in ("w", "u", "b"):
                out[f"gru/{gate}_{part}"] = getattr(self.gru, f"{gate}_{part}")
        for field in ("rate_w1", "rate_b1", "rate_w2", "rate_b2",
                      "inc_w1", "inc_b1", "inc_w2", "inc_b2"):
            out[f"heads/{field}"] = getattr(self.heads, field)
        return out

    @classmethod
    def unflatten(cls, location_id: str, tensors: dict[str, np.ndarray]) -> "StanParams":
        def layer(prefix):
            heads = sorted(
                {int(k.split("/")[1][1:]) for k in tensors if k.startswith(prefix + "/")}
            )
            if not heads:
                return None
            return GatLayerParams(
                w_z=[tensors[f"{prefix}/h{k}/w_z"] for k in heads],
                w_a=[tensors[f"{prefix}/h{k}/w_a"] for k in heads],
            )

        gru = GruParams(**{
            f"{gate}_{part}": tensors[f"gru/{gate}_{part}"]
            for gate in ("update", "reset", "cand") for part in ("w", "u", "b")
        })
        heads = HeadParams(**{
            field: tensors[f"heads/{field}"]
            for field in ("rate_w1", "rate_b1", "rate_w2", "rate_b2",
                          "inc_w1", "inc_b1", "inc_w2", "inc_b2")
        })
        return cls(location_id=location_id, gat1=layer("gat1"), gat2=layer("gat2"),
                   gru=gru, heads=heads)


@dataclass
class Prediction:
    """One forward pass: window rates and per-day increments."""

    beta: float
    gamma: float
    delta_infected: np.ndarray
    delta_recovered: np.ndarray


# ---------------------------------------------------------------------------
# tensor-level builders


def bind_params(tape: Tape, params: StanParams, trainable: bool = True):
    """Mirror a StanParams onto a tape as Tensors (named when trainable)."""
    flat = params.flatten()
    if trainable:
        return {name: tape.parameter(name, arr) for name, arr in flat.items()}
    return {name: tape.leaf(arr) for name, arr in flat.items()}


def attention_inputs(graph, mode: str):
    """Mask and optional logit bias for the requested attention mode."""
    if mode not in ATTENTION_MODES:
        raise ContractError(f"attention mode must be one of {ATTENTION_MODES}, got {mode!r}")
    n = graph.n_nodes
    if mode == "dense":
        return np.ones((n, n), dtype=bool), None
    mask = graph.mask
    if mode == "weighted":
        bias = np.where(mask, np.log(np.maximum(graph.weights, 1e-300)), 0.0)
        return mask, bias
    return mask, None


def prepare_gat_heads(bound: dict, layer_name: str, n_heads: int, f_out: int):
    """Slice each head's attention row once per tape: (w_z, a_src, a_dst)."""
    heads = []
    for k in range(n_heads):
        wa = bound[f"{layer_name}/h{k}/w_a"]
        heads.append((
            bound[f"{layer_name}/h{k}/w_z"],
            ad.take_slice(wa, 0, f_out),
            ad.take_slice(wa, f_out, 2 * f_out),
        ))
    return heads


def gat_layer_t(x, heads, mask: np.ndarray, bias=None,
                return_attention: bool = False):
    """One multi-head attention layer on Tensors; averages head aggregates."""
    agg = None
    attentions = []
    for wz, a_src, a_dst in heads:
        u = ad.matmul(x, wz, transpose_b=True)
        s_src = ad.matmul(u, a_src)
        s_dst = ad.matmul(u, a_dst)
        logits = ad.leaky_relu(ad.outer_add(s_src, s_dst))
        if bias is not None:
            logits = ad.add(logits, bias)
        attn = ad.masked_softmax(logits, mask)
        attentions.append(attn)
        weighted = ad.attend(attn, u)
        agg = weighted if agg is None else ad.add(agg, weighted)
    out = ad.scale(agg, 1.0 / len(heads))
    if return_attention:
        return out, attentions
    return out


def gru_step_t(x, h, bound: dict):
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(bound["gru/update_w"], x),
                                 ad.matmul(bound["gru/update_u"], h)),
                          bound["gru/update_b"]))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(bound["gru/reset_w"], x),
                                 ad.matmul(bound["gru/reset_u"], h)),
                          bound["gru/reset_b"]))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(bound["gru/cand_w"], x),
                                 ad.matmul(bound["gru/cand_u"], ad.mul(r, h))),
                          bound["gru/cand_b"]))
    return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, cand))


def gru_states_t(inputs, bound: dict, hidden: int) -> list:
    """Hidden state after each input, starting from h_0 = 0."""
    h = np.zeros(hidden)
    states = []
    for x in inputs:
        h = gru_step_t(x, h, bound)
        states.append(h)
    return states


def mlp_t(h, bound: dict, prefix: str):
    hidden = ad.leaky_relu(ad.add(ad.matmul(bound[f"heads/{prefix}_w1"], h),
                                  bound[f"heads/{prefix}_b1"]))
    return ad.add(ad.matmul(bound[f"heads/{prefix}_w2"], hidden),
                  bound[f"heads/{prefix}_b2"])


def mlp_rows_t(h_rows, bound: dict, prefix: str):
    """Row-batched MLP: h_rows is (A x H), output (A x out)."""
    hidden = ad.leaky_relu(ad.add_rowvec(
        ad.matmul(h_rows, bound[f"heads/{prefix}_w1"], transpose_b=True),
        bound[f"heads/{prefix}_b1"]))
    return ad.add_rowvec(
        ad.matmul(hidden, bound[f"heads/{prefix}_w2"], transpose_b=True),
        bound[f"heads/{prefix}_b2"])


def day_inputs_for(view, config, days: int, location: int):
    """Raw per-day model inputs: node-feature matrices, or for stan-graph the
    location's own window vectors."""
    if config.mode == "stan-graph":
        return [feature_window(view, location, s, config.l_i) for s in range(days)]
    return [day_feature_matrix(view, s, config.l_i) for s in range(days)]


def embedding_sequence_t(day_inputs, graph, params: StanParams, bound: dict,
                         config, location: int):
    """GRU input tensors, one per day.

    Full/stan-pc modes run both attention layers and max-pooling per day;
    stan-graph feeds the location's own feature window directly.  With
    ``concat_node_embedding`` the location's second-layer embedding row is
    appended to the pooled vector.
    """
    if config.mode == "stan-graph":
        return list(day_inputs)
    mask, bias = attention_inputs(graph, config.attention)
    heads1 = prepare_gat_heads(bound, "gat1", params.gat1.n_heads, params.gat1.f_out)
    heads2 = prepare_gat_heads(bound, "gat2", params.gat2.n_heads, params.gat2.f_out)
    inputs = []
    for x in day_inputs:
        z1 = gat_layer_t(x, heads1, mask, bias)
        z2 = gat_layer_t(z1, heads2, mask, bias)
        pooled = ad.columnwise_max(z2)
        if getattr(config, "concat_node_embedding", False):
            pooled = ad.row_concat([pooled, ad.take_row(z2, location)])
        inputs.append(pooled)
    return inputs


# ---------------------------------------------------------------------------
# public ndarray interface


def gat_layer_forward(x: np.ndarray, graph, params: GatLayerParams,
                      mode: str = "masked") -> np.ndarray:
    """Node embeddings for one attention layer (ndarray in, ndarray out)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != graph.n_nodes:
        raise DimensionError(
            f"node features {x.shape} do not match graph with {graph.n_nodes} nodes"
        )
    if x.shape[1] != params.f_in:
        raise DimensionError(f"feature width {x.shape[1]} != layer input {params.f_in}")
    tape = Tape()
    bound = {}
    for k in range(params.n_heads):
        bound[f"gat/h{k}/w_z"] = tape.leaf(params.w_z[k])
        bound[f"gat/h{k}/w_a"] = tape.leaf(params.w_a[k])
    mask, bias = attention_inputs(graph, mode)
    heads = prepare_gat_heads(bound, "gat", params.n_heads, params.f_out)
    out = gat_layer_t(x, heads, mask, bias)
    return out.value


def gat_attention(x: np.ndarray, graph, params: GatLayerParams,
                  mode: str = "masked") -> list[np.ndarray]:
    """Per-head attention matrices (rows sum to 1 over unmasked entries)."""
    tape = Tape()
    bound = {}
    for k in range(params.n_heads):
        bound[f"gat/h{k}/w_z"] = tape.leaf(params.w_z[k])
        bound[f"gat/h{k}/w_a"] = tape.leaf(params.w_a[k])
    mask, bias = attention_inputs(graph, mode)
    heads = prepare_gat_heads(bound, "gat", params.n_heads, params.f_out)
    _, attns = gat_layer_t(np.asarray(x, dtype=np.float64), heads, mask, bias,
                           return_attention=True)
    return [a.value for a in attns]


def graph_embedding(z: np.ndarray) -> np.ndarray:
    """Columnwise maximum over node embeddings."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ContractError(f"graph embedding needs a nonempty 2-D input, got {z.shape}")
    return z.max(axis=0)


def gru_forward(sequence, params: GruParams) -> np.ndarray:
    """Final hidden state of the GRU run over a nonempty vector sequence."""
    seq = [np.asarray(x, dtype=np.float64) for x in sequence]
    if not seq:
        raise ContractError("gru_forward requires a nonempty sequence")
    for x in seq:
        if x.shape != (params.input_size,):
            raise DimensionError(
                f"gru input shape {x.shape} != ({params.input_size},)"
            )
    tape = Tape()
    bound = {f"gru/{g}_{p}": tape.leaf(getattr(params, f"{g}_{p}"))
             for g in ("update", "reset", "cand") for p in ("w", "u", "b")}
    states = gru_states_t(seq, bound, params.hidden)
    return states[-1].value


def predict_heads(h: np.ndarray, params: HeadParams):
    """(beta, gamma, delta_I, delta_R) from a hidden state."""
    h = np.asarray(h, dtype=np.float64)
    tape = Tape()
    bound = {f"heads/{f}": tape.leaf(getattr(params, f))
             for f in ("rate_w1", "rate_b1", "rate_w2", "rate_b2",
                       "inc_w1", "inc_b1", "inc_w2", "inc_b2")}
    rates = ad.sigmoid(mlp_t(h, bound, "rate")).value
    inc = mlp_t(h, bound, "inc").value
    horizon = params.horizon
    return float(rates[0]), float(rates[1]), inc[:horizon].copy(), inc[horizon:].copy()


def stan_forward(view, graph, location: int, t: int, params: StanParams,
                 config) -> Prediction:
    """Full pipeline at anchor day ``t`` for one location.

    ``view`` is a dataset-like object already in model feature space (the
    trainer normalizes before calling).  The GRU consumes the embedding of
    every day from the series start through ``t``.
    """
    if config.mode not in MODEL_MODES:
        raise ContractError(f"mode must be one of {MODEL_MODES}, got {config.mode!r}")
    if config.mode != "stan-graph" and params.gat1 is None:
        raise ContractError("graph mode requires attention layer parameters")
    if not 0 <= t < view.dynamic.shape[1]:
        raise ContractError(f"anchor day {t} outside series of length {view.dynamic.shape[1]}")
    tape = Tape()
    bound = bind_params(tape, params, trainable=False)
    day_inputs = day_inputs_for(view, config, t + 1, location)
    inputs = embedding_sequence_t(day_inputs, graph, params, bound, config, location)
    states = gru_states_t(inputs, bound, params.gru.hidden)
    h = states[-1]
    rates = ad.sigmoid(mlp_t(h, bound, "rate")).value
    inc = mlp_t(h, bound, "inc").value
    horizon = params.heads.horizon
    return Prediction(
        beta=float(rates[0]),
        gamma=float(rates[1]),
        delta_infected=inc[:horizon].copy(),
        delta_recovered=inc[horizon:].copy(),
    )
