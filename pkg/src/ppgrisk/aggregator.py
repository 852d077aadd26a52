"""Sequence-to-one risk classifiers over per-chunk embedding sequences.

Four interchangeable kinds behind one forward contract:
  blstm      bidirectional LSTM, final-state concat
  blstm_att  bidirectional LSTM with learned-score softmax attention pooling
  ssm        diagonal selective state-space scan (input-dependent gates)
  xlstm      scalar-memory LSTM with stabilized exponential gating

forward(seq (B, L, D), lengths=None) -> logits (B,). Variable lengths are
handled by zero-padding plus the lengths mask; padded rows never influence a
sequence's score. The risk head is a single linear unit; probability =
sigmoid(logit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError

AGGREGATOR_KINDS = ("blstm", "blstm_att", "ssm", "xlstm")
BCE_EPS = 1e-7


@dataclass
class RiskScore:
    probability: float
    logit: float


@dataclass
class AggregatorConfig:
    kind: str = "blstm_att"
    input_dim: int = 32
    hidden_dim: Optional[int] = None   # resolved from param_budget when None
    n_layers: int = 1
    param_budget: int = 30_000

    def validate(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(f"unknown aggregator kind {self.kind!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")


def bce_loss(p: torch.Tensor, y: torch.Tensor,
             weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Binary cross-entropy on probabilities, clamped to [eps, 1-eps]."""
    if not torch.is_tensor(p):
        p = torch.as_tensor(p, dtype=torch.float64)
    p = torch.clamp(p, BCE_EPS, 1.0 - BCE_EPS)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    loss = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    if weight is not None:
        loss = loss * torch.as_tensor(weight, dtype=p.dtype, device=p.device)
    return loss.mean()


def _lengths_mask(L: int, lengths: Optional[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    """(B, L) bool mask of valid positions."""
    B = like.shape[0]
    if lengths is None:
        return torch.ones(B, L, dtype=torch.bool, device=like.device)
    lengths = torch.as_tensor(lengths, dtype=torch.long, device=like.device)
    if lengths.min() < 1 or lengths.max() > L:
        raise DataError("lengths must be in [1, L]")
    return torch.arange(L, device=like.device)[None, :] < lengths[:, None]


def attention_pool(hidden: torch.Tensor, score_weight: torch.Tensor,
                   score_bias: Optional[torch.Tensor] = None,
                   mask: Optional[torch.Tensor] = None):
    """Learned-score softmax pooling.

    hidden: (L, H) or (B, L, H); score_weight: (H,). Scores are a linear
    projection per timestep; weights = softmax(scores) over valid positions;
    output = sum_t w_t * hidden_t. Returns (pooled, weights).
    """
    squeeze = hidden.ndim == 2
    if squeeze:
        hidden = hidden.unsqueeze(0)
    scores = hidden @ score_weight
    if score_bias is not None:
        scores = scores + score_bias
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = F.softmax(scores, dim=1)
    pooled = torch.einsum("bl,blh->bh", weights, hidden)
    if squeeze:
        return pooled[0], weights[0]
    return pooled, weights


def sequential_scan(a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """h_t = a_t * h_{t-1} + x_t with h_0 = 0, looped over dim 1."""
    B, L, H = x.shape
    h = torch.zeros(B, H, dtype=x.dtype, device=x.device)
    out = []
    for t in range(L):
        h = a[:, t] * h + x[:, t]
        out.append(h)
    return torch.stack(out, dim=1)


def parallel_scan(a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Same recurrence via a doubling prefix scan over the affine maps
    h -> a*h + x (associative composition), O(L log L) work."""
    A = a
    X = x
    L = x.shape[1]
    d = 1
    while d < L:
        X = torch.cat([X[:, :d], X[:, d:] + A[:, d:] * X[:, :-d]], dim=1)
        A = torch.cat([A[:, :d], A[:, d:] * A[:, :-d]], dim=1)
        d *= 2
    return X


class SSMLayer(nn.Module):
    """Diagonal selective recurrence: gates a_t in (0,1) and b_t computed
    from the input content, h_t = a_t * h_{t-1} + b_t * u_t."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.a_proj = nn.Linear(input_dim, hidden_dim)
        self.b_proj = nn.Linear(input_dim, hidden_dim)
        self.u_proj = nn.Linear(input_dim, hidden_dim)

    def forward(self, x: torch.Tensor, parallel: bool = True) -> torch.Tensor:
        a = torch.sigmoid(self.a_proj(x))
        b = torch.sigmoid(self.b_proj(x))
        u = self.u_proj(x)
        scan = parallel_scan if parallel else sequential_scan
        return scan(a, b * u)


def ssm_scan(x: torch.Tensor, layer: SSMLayer, parallel: bool = True) -> torch.Tensor:
    """The (L, H) hidden-state sequence of one selective-scan layer."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    h = layer(x, parallel=parallel)
    return h[0] if squeeze else h


class XLSTMCell(nn.Module):
    """Scalar-memory LSTM cell with exponential input gate, exponential (or
    sigmoid) forget gate, and a log-domain stabilizer.

    State (c, n, m, h): cell, normalizer, stabilizer, output. Stabilized
    update: m_t = max(log f_t + m_{t-1}, log i_t), gates rescaled by
    exp(-m_t); output = o_t * c_t / n_t. Mathematically identical to naive
    exponential gating, but finite for pre-activations far outside the safe
    range.
    """

    def __init__(self, input_dim: int, hidden_dim: int, forget_gate: str = "exp"):
        super().__init__()
        if forget_gate not in ("exp", "sigmoid"):
            raise ConfigError("forget_gate must be 'exp' or 'sigmoid'")
        self.hidden_dim = hidden_dim
        self.forget_gate = forget_gate
        self.w_x = nn.Linear(input_dim, 4 * hidden_dim)
        self.w_h = nn.Linear(hidden_dim, 4 * hidden_dim, bias=False)

    def init_state(self, batch: int, dtype, device):
        z = torch.zeros(batch, self.hidden_dim, dtype=dtype, device=device)
        return z.clone(), z.clone(), z.clone(), z.clone()

    def step(self, x_t: torch.Tensor, state, stabilized: bool = True):
        c, n, m, h = state
        pre = self.w_x(x_t) + self.w_h(h)
        i_pre, f_pre, z_pre, o_pre = pre.chunk(4, dim=-1)
        z = torch.tanh(z_pre)
        o = torch.sigmoid(o_pre)
        log_f = f_pre if self.forget_gate == "exp" else -F.softplus(-f_pre)
        if stabilized:
            m_new = torch.maximum(log_f + m, i_pre)
            i_gate = torch.exp(i_pre - m_new)
            f_gate = torch.exp(log_f + m - m_new)
        else:
            m_new = m
            i_gate = torch.exp(i_pre)
            f_gate = torch.exp(log_f)
        c_new = f_gate * c + i_gate * z
        n_new = f_gate * n + i_gate
        h_new = o * c_new / torch.clamp(n_new, min=1e-12)
        return (c_new, n_new, m_new, h_new), h_new


def xlstm_cell(cell: XLSTMCell, x_t: torch.Tensor, state, stabilized: bool = True):
    """Functional single-step wrapper around XLSTMCell.step."""
    return cell.step(x_t, state, stabilized=stabilized)


class _AggregatorBase(nn.Module):
    def __init__(self, config: AggregatorConfig):
        super().__init__()
        self.config = config

    def _check_input(self, seq: torch.Tensor):
        if seq.ndim != 3:
            raise DataError(f"expected (B, L, D) input, got shape {tuple(seq.shape)}")
        if seq.shape[1] < 1:
            raise DataError("empty sequence")
        if seq.shape[2] != self.config.input_dim:
            raise DataError(f"input width {seq.shape[2]} != configured "
                            f"{self.config.input_dim}")

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


class BLSTMAggregator(_AggregatorBase):
    """Bidirectional LSTM over the embedding sequence.

    Variable-length batches are zero-padded and run unpacked: all-zero rows
    flow through the recurrence (the same convention as zero-filled signal
    gaps) and the length mask governs the readout — attention pooling skips
    padded positions; final-state pooling reads the forward direction at each
    sequence's true last position.
    """

    def __init__(self, config: AggregatorConfig, hidden_dim: int, attention: bool):
        super().__init__(config)
        self.attention = attention
        self.hidden_dim = hidden_dim
        self.lstm = nn.LSTM(config.input_dim, hidden_dim, num_layers=config.n_layers,
                            bidirectional=True, batch_first=True)
        if attention:
            self.att_score = nn.Linear(2 * hidden_dim, 1)
        self.head = nn.Linear(2 * hidden_dim, 1)

    def forward(self, seq: torch.Tensor, lengths=None) -> torch.Tensor:
        self._check_input(seq)
        out, (h_n, _) = self.lstm(seq)
        if self.attention:
            mask = _lengths_mask(seq.shape[1], lengths, seq)
            pooled, _ = attention_pool(out, self.att_score.weight[0],
                                       self.att_score.bias, mask=mask)
        elif lengths is None:
            # final layer's forward and backward terminal states
            pooled = torch.cat([h_n[-2], h_n[-1]], dim=-1)
        else:
            idx = torch.as_tensor(lengths, dtype=torch.long, device=seq.device) - 1
            rows = torch.arange(seq.shape[0], device=seq.device)
            pooled = torch.cat([out[rows, idx, :self.hidden_dim],
                                out[:, 0, self.hidden_dim:]], dim=-1)
        return self.head(pooled).squeeze(-1)


class SSMAggregator(_AggregatorBase):
    def __init__(self, config: AggregatorConfig, hidden_dim: int):
        super().__init__(config)
        dims = [config.input_dim] + [hidden_dim] * config.n_layers
        self.layers = nn.ModuleList(SSMLayer(dims[i], dims[i + 1])
                                    for i in range(config.n_layers))
        self.head = nn.Linear(hidden_dim, 1)

    def forward(self, seq: torch.Tensor, lengths=None, parallel: bool = True) -> torch.Tensor:
        self._check_input(seq)
        h = seq
        for layer in self.layers:
            h = layer(h, parallel=parallel)
        if lengths is None:
            last = h[:, -1]
        else:
            idx = (torch.as_tensor(lengths, dtype=torch.long, device=h.device) - 1)
            last = h[torch.arange(h.shape[0], device=h.device), idx]
        return self.head(last).squeeze(-1)


class XLSTMAggregator(_AggregatorBase):
    def __init__(self, config: AggregatorConfig, hidden_dim: int,
                 forget_gate: str = "exp"):
        super().__init__(config)
        dims = [config.input_dim] + [hidden_dim] * config.n_layers
        self.cells = nn.ModuleList(XLSTMCell(dims[i], dims[i + 1], forget_gate)
                                   for i in range(config.n_layers))
        self.head = nn.Linear(hidden_dim, 1)

    def forward(self, seq: torch.Tensor, lengths=None) -> torch.Tensor:
        self._check_input(seq)
        B, L, _ = seq.shape
        h = seq
        for cell in self.cells:
            state = cell.init_state(B, seq.dtype, seq.device)
            outs = []
            for t in range(L):
                state, h_t = cell.step(h[:, t], state)
                outs.append(h_t)
            h = torch.stack(outs, dim=1)
        if lengths is None:
            last = h[:, -1]
        else:
            idx = (torch.as_tensor(lengths, dtype=torch.long, device=h.device) - 1)
            last = h[torch.arange(B, device=h.device), idx]
        return self.head(last).squeeze(-1)


def _construct(config: AggregatorConfig, hidden_dim: int) -> _AggregatorBase:
    if config.kind == "blstm":
        return BLSTMAggregator(config, hidden_dim, attention=False)
    if config.kind == "blstm_att":
        return BLSTMAggregator(config, hidden_dim, attention=True)
    if config.kind == "ssm":
        return SSMAggregator(config, hidden_dim)
    if config.kind == "xlstm":
        return XLSTMAggregator(config, hidden_dim)
    raise ConfigError(f"unknown aggregator kind {config.kind!r}")


def _param_count_fn(config: AggregatorConfig):
    """Exact closed form for n_params(hidden): every kind's count is a
    quadratic in the hidden size, so three tiny constructions pin it down."""
    counts = [_construct(config, h).n_params() for h in (1, 2, 3)]
    # solve [h^2 h 1] @ (a b c) = count for h = 1, 2, 3
    a = (counts[2] - 2 * counts[1] + counts[0]) // 2
    b = counts[1] - counts[0] - 3 * a
    c = counts[0] - a - b
    return lambda h: a * h * h + b * h + c


def resolve_hidden_dim(config: AggregatorConfig) -> int:
    """Hidden size whose parameter count lands nearest the budget."""
    count = _param_count_fn(config)
    hi = 1
    while count(hi) <= config.param_budget:
        hi *= 2
    lo = 1
    while lo < hi:                   # largest h with count(h) <= budget
        mid = (lo + hi + 1) // 2
        if count(mid) <= config.param_budget:
            lo = mid
        else:
            hi = mid - 1
    if count(lo) <= config.param_budget and \
            abs(count(lo + 1) - config.param_budget) < abs(count(lo) - config.param_budget):
        return lo + 1
    return lo


def _init_weights(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for name, p in sorted(module.named_parameters()):
        if p.ndim >= 2:
            fan_in = p.shape[1]
            k = 1.0 / math.sqrt(fan_in)
            p.data = (torch.rand(p.shape, generator=gen) * 2 - 1) * k
        else:
            p.data.zero_()


def build_aggregator(config: AggregatorConfig, seed: int = 0) -> _AggregatorBase:
    config.validate()
    hidden = config.hidden_dim if config.hidden_dim else resolve_hidden_dim(config)
    model = _construct(config, hidden)
    realized = model.n_params()
    if config.hidden_dim is None and not (
            0.8 * config.param_budget <= realized <= 1.2 * config.param_budget):
        raise ConfigError(f"{config.kind}: cannot realize {config.param_budget} "
                          f"params within +/-20% (got {realized})")
    _init_weights(model, seed)
    model.config = AggregatorConfig(config.kind, config.input_dim, hidden,
                                    config.n_layers, config.param_budget)
    return model


def risk_score(model: _AggregatorBase, seq: torch.Tensor) -> RiskScore:
    """Score a single sequence (L, D) -> RiskScore."""
    model.eval()
    with torch.no_grad():
        logit = model(seq.unsqueeze(0))[0].item()
    return RiskScore(probability=float(torch.sigmoid(torch.tensor(logit))), logit=logit)
