"""Conditional policy backends with exact analytic gradients.

Two backends share one interface:

  TabularPolicy    logits over (context, class, response); fully
                   expressive, so the reward-weighted regression optimum
                   coincides exactly with the closed-form oracle policy.
  NeuralLMPolicy   a tiny language model over a fixed context window:
                   learned token and position embeddings, one
                   single-head causal attention block, two tanh
                   feed-forward blocks, and an output projection. The
                   class condition reaches the model only through the
                   rendered condition tokens, which is what makes the
                   shared-parameter conditioning experiments meaningful.

Both backends run in float64 and expose the differentiable loss path
through the autodiff engine; sampling and embedding use a plain numpy
fast path. BasePolicy is a frozen parameter snapshot used as the
pre-trained starting point.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import BackendUnsupported, InvalidConfig, OutOfVocab
from .templating import RenderedExample, Vocabulary

CHECKPOINT_VERSION = 1

_NEURAL_PARAM_ORDER = (
    "tok_emb", "pos_emb", "wq", "wk", "wv", "w1", "b1", "w2", "b2", "w3", "b3"
)
_TABULAR_PARAM_ORDER = ("logits",)


def _stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Tabular backend


class TabularPolicy:
    """Softmax policy over explicit (context, class, response) index sets.

    Sequences are the fixed triple [x, c, y]: two conditioning tokens and
    one response token, the only position that may carry loss.
    """

    backend = "tabular"

    def __init__(self, x_labels, c_labels, y_labels, logits: np.ndarray, seed: int = 0):
        self.x_labels = list(x_labels)
        self.c_labels = list(c_labels)
        self.y_labels = list(y_labels)
        logits = np.asarray(logits, dtype=np.float64)
        expected = (len(self.x_labels), len(self.c_labels), len(self.y_labels))
        if logits.shape != expected:
            raise InvalidConfig(f"logits shape {logits.shape} != {expected}")
        if not np.all(np.isfinite(logits)):
            raise InvalidConfig("logits must be finite")
        self.params = {"logits": ad.Tensor(logits, requires_grad=True)}
        self.seed = seed

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.params["logits"].value.shape

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return int(self.params["logits"].value.size)

    def conditionals(self) -> np.ndarray:
        """p(y | x, c) for every slot, each slice normalized."""
        return _stable_softmax(self.params["logits"].value, axis=-1)

    def next_response_dist(self, x: int, c: int) -> np.ndarray:
        self._check_slot(x, c)
        return _stable_softmax(self.params["logits"].value[x, c])

    def _check_slot(self, x: int, c: int):
        n_x, n_c, _ = self.shape
        if not (0 <= x < n_x and 0 <= c < n_c):
            raise OutOfVocab(f"slot ({x}, {c}) out of range for shape {self.shape}")

    def _check_example(self, tokens: np.ndarray):
        n_x, n_c, n_y = self.shape
        if len(tokens) != 3:
            raise InvalidConfig("tabular sequences are the triple [x, c, y]")
        x, c, y = (int(t) for t in tokens)
        if not (0 <= x < n_x and 0 <= c < n_c and 0 <= y < n_y):
            raise OutOfVocab(f"triple ({x}, {c}, {y}) out of range for shape {self.shape}")

    def token_logprobs_graph(self, examples: list[RenderedExample]):
        """Differentiable per-target log-probabilities for a batch.

        Returns (logprob tensor (N,), example index (N,), masked counts (B,)).
        """
        xs, cs, ys, ex_idx = [], [], [], []
        for b, ex in enumerate(examples):
            self._check_example(ex.token_ids)
            if ex.loss_mask[0] or ex.loss_mask[1]:
                raise InvalidConfig("tabular loss masks may cover only the response")
            if ex.loss_mask[2]:
                xs.append(int(ex.token_ids[0]))
                cs.append(int(ex.token_ids[1]))
                ys.append(int(ex.token_ids[2]))
                ex_idx.append(b)
        logp = ad.log_softmax(self.params["logits"], axis=-1)
        sel = ad.select(logp, (np.array(xs, dtype=np.int64), np.array(cs, dtype=np.int64), np.array(ys, dtype=np.int64)))
        counts = np.array([int(ex.loss_mask.sum()) for ex in examples], dtype=np.float64)
        return sel, np.array(ex_idx, dtype=np.int64), counts

    def sequence_logprob(self, tokens, mask) -> float:
        """Sum of log next-token probabilities over masked positions."""
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return 0.0
        self._check_example(tokens)
        if mask[0] or mask[1]:
            raise InvalidConfig("tabular loss masks may cover only the response")
        x, c, y = (int(t) for t in tokens)
        return float(_log_softmax_np(self.params["logits"].value[x, c])[y])

    def sample(self, prefix, max_len: int, temperature: float, seed: int) -> list[int]:
        """Draw the single response token for the slot prefix [x, c]."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        prefix = list(prefix)
        if len(prefix) != 2:
            raise InvalidConfig("tabular sampling prefix is the slot [x, c]")
        if max_len < 1:
            return []
        x, c = int(prefix[0]), int(prefix[1])
        self._check_slot(x, c)
        p = _stable_softmax(self.params["logits"].value[x, c] / temperature)
        rng = np.random.default_rng(seed)
        return [int(rng.choice(len(p), p=p))]

    def clone(self) -> "TabularPolicy":
        return TabularPolicy(
            self.x_labels,
            self.c_labels,
            self.y_labels,
            self.params["logits"].value.copy(),
            seed=self.seed,
        )

    @classmethod
    def from_distribution(cls, probs: np.ndarray, x_labels=None, c_labels=None, y_labels=None) -> "TabularPolicy":
        """Logits realizing a full-support conditional table (log of targets)."""
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs <= 0):
            raise InvalidConfig("from_distribution needs full support")
        n_x, n_c, n_y = probs.shape
        return cls(
            x_labels if x_labels is not None else list(range(n_x)),
            c_labels if c_labels is not None else list(range(n_c)),
            y_labels if y_labels is not None else list(range(n_y)),
            np.log(probs),
        )


def init_tabular(x_labels, c_labels, y_labels, seed: int, init_scale: float = 0.0) -> TabularPolicy:
    """Seeded tabular policy; the default zero logits give uniform slices."""
    x_labels, c_labels, y_labels = list(x_labels), list(c_labels), list(y_labels)
    if not (x_labels and c_labels and y_labels):
        raise InvalidConfig("index sets must be non-empty")
    rng = np.random.default_rng(seed)
    logits = init_scale * rng.standard_normal((len(x_labels), len(c_labels), len(y_labels)))
    return TabularPolicy(x_labels, c_labels, y_labels, logits, seed=seed)


# ---------------------------------------------------------------------------
# Neural backend


@dataclass(frozen=True)
class NeuralConfig:
    vocab: Vocabulary
    embed_dim: int = 32
    hidden_dim: int = 64
    context_len: int = 64
    init_scale: float = 0.1

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_dim, self.context_len) < 1:
            raise InvalidConfig("model dimensions must be positive")
        if self.init_scale < 0:
            raise InvalidConfig("init_scale must be non-negative")

    def parameter_count(self) -> int:
        v, e, h, k = self.vocab.size, self.embed_dim, self.hidden_dim, self.context_len
        return v * e + k * e + 3 * e * e + 3 * e * h + h + h * h + h + h * v + v


class NeuralLMPolicy:
    """Tiny causal language model over the closed vocabulary.

    Each position's features are its token-plus-position embedding, a
    single-head causal attention readout (content-addressable context),
    and the running mean of the prefix embeddings (an always-on linear
    carrier that keeps rare context tokens visible to the gradient).
    Two tanh feed-forward blocks and a projection map these to
    next-token logits.
    """

    backend = "neural"

    def __init__(self, config: NeuralConfig, params: dict[str, np.ndarray], seed: int = 0):
        self.config = config
        self.vocab = config.vocab
        self.params = {
            name: ad.Tensor(np.asarray(params[name], dtype=np.float64), requires_grad=True)
            for name in _NEURAL_PARAM_ORDER
        }
        self.seed = seed
        v, e, h, k = config.vocab.size, config.embed_dim, config.hidden_dim, config.context_len
        shapes = {
            "tok_emb": (v, e),
            "pos_emb": (k, e),
            "wq": (e, e),
            "wk": (e, e),
            "wv": (e, e),
            "w1": (3 * e, h),
            "b1": (h,),
            "w2": (h, h),
            "b2": (h,),
            "w3": (h, v),
            "b3": (v,),
        }
        for name, shape in shapes.items():
            if self.params[name].value.shape != shape:
                raise InvalidConfig(f"parameter {name} has shape "
                                    f"{self.params[name].value.shape}, expected {shape}")

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def _check_ids(self, ids: np.ndarray):
        if len(ids) == 0:
            raise InvalidConfig("token sequence must be non-empty")
        if len(ids) > self.config.context_len:
            raise InvalidConfig(
                f"sequence length {len(ids)} exceeds context window {self.config.context_len}"
            )
        if ids.min() < 0 or ids.max() >= self.vocab.size:
            raise OutOfVocab(f"token id out of range 0..{self.vocab.size - 1}")

    # numpy fast path -------------------------------------------------------

    def _np_forward(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hidden activations (T, H) and next-token logits (T, V)."""
        p = {k: t.value for k, t in self.params.items()}
        t_len = len(ids)
        e = p["tok_emb"][ids] + p["pos_emb"][:t_len]
        q, k_, v = e @ p["wq"], e @ p["wk"], e @ p["wv"]
        scores = (q @ k_.T) / math.sqrt(self.config.embed_dim)
        scores = scores + np.where(
            np.arange(t_len)[:, None] >= np.arange(t_len)[None, :], 0.0, -1e30
        )
        attn = _stable_softmax(scores, axis=-1)
        mean = np.cumsum(e, axis=0) / np.arange(1, t_len + 1)[:, None]
        z = np.concatenate([e, attn @ v, mean], axis=1)
        h1 = np.tanh(z @ p["w1"] + p["b1"])
        h2 = np.tanh(h1 @ p["w2"] + p["b2"])
        logits = h2 @ p["w3"] + p["b3"]
        return h2, logits

    def _np_last_logits(self, ids: np.ndarray) -> np.ndarray:
        p = {k: t.value for k, t in self.params.items()}
        t_len = len(ids)
        e = p["tok_emb"][ids] + p["pos_emb"][:t_len]
        q_last = e[-1] @ p["wq"]
        scores = (e @ p["wk"]) @ q_last / math.sqrt(self.config.embed_dim)
        attn = _stable_softmax(scores)
        z = np.concatenate([e[-1], attn @ (e @ p["wv"]), e.mean(axis=0)])
        h1 = np.tanh(z @ p["w1"] + p["b1"])
        h2 = np.tanh(h1 @ p["w2"] + p["b2"])
        return h2 @ p["w3"] + p["b3"]

    def next_token_dist(self, prefix, temperature: float = 1.0) -> np.ndarray:
        ids = np.asarray(prefix, dtype=np.int64)
        self._check_ids(ids)
        return _stable_softmax(self._np_last_logits(ids) / temperature)

    def sample(self, prefix, max_len: int, temperature: float, seed: int) -> list[int]:
        """Sample up to max_len new tokens, stopping after end-of-turn."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        ids = list(int(t) for t in prefix)
        if not ids:
            raise InvalidConfig("sampling prefix must be non-empty")
        rng = np.random.default_rng(seed)
        out: list[int] = []
        for _ in range(max_len):
            if len(ids) >= self.config.context_len:
                break
            p = self.next_token_dist(ids, temperature=temperature)
            tok = int(rng.choice(len(p), p=p))
            out.append(tok)
            ids.append(tok)
            if tok == self.vocab.eot_id:
                break
        return out

    def embed_tokens(self, tokens) -> np.ndarray:
        """Mean over positions of the final-layer activations."""
        ids = np.asarray(tokens, dtype=np.int64)
        self._check_ids(ids)
        hidden, _ = self._np_forward(ids)
        return hidden.mean(axis=0)

    # differentiable path ---------------------------------------------------

    def _graph_forward(self, ids: np.ndarray) -> ad.Tensor:
        """Log next-token distributions (B, T, V) for right-padded ids.

        Right padding keeps the causal mask sound: real positions never
        attend to pads, and pad positions are never selected as targets.
        """
        _, t_len = ids.shape
        tok = ad.gather_rows(self.params["tok_emb"], ids)
        pos = ad.gather_rows(self.params["pos_emb"], np.arange(t_len))
        e = ad.add(tok, pos)
        q = ad.matmul(e, self.params["wq"])
        k = ad.matmul(e, self.params["wk"])
        v = ad.matmul(e, self.params["wv"])
        causal = np.where(
            np.arange(t_len)[:, None] >= np.arange(t_len)[None, :], 0.0, -1e30
        )
        scores = ad.add(
            ad.scale(ad.bmm(q, ad.transpose_last2(k)), 1.0 / math.sqrt(self.config.embed_dim)),
            causal,
        )
        attn = ad.softmax(scores, axis=-1)
        inv = (1.0 / np.arange(1, t_len + 1))[None, :, None]
        mean = ad.mul(ad.cumsum(e, axis=1), inv)
        z = ad.concat_last(ad.concat_last(e, ad.bmm(attn, v)), mean)
        h1 = ad.tanh(ad.add(ad.matmul(z, self.params["w1"]), self.params["b1"]))
        h2 = ad.tanh(ad.add(ad.matmul(h1, self.params["w2"]), self.params["b2"]))
        logits = ad.add(ad.matmul(h2, self.params["w3"]), self.params["b3"])
        return ad.log_softmax(logits, axis=-1)

    def token_logprobs_graph(self, examples: list[RenderedExample]):
        """Differentiable per-target log-probabilities for a batch.

        Targets at position t are predicted from the prefix ending at
        t - 1; position 0 can never be a target.
        """
        lengths = [len(ex) for ex in examples]
        t_len = max(lengths)
        ids = np.full((len(examples), t_len), self.vocab.pad_id, dtype=np.int64)
        sel_b, sel_t, sel_tok, ex_idx = [], [], [], []
        for b, ex in enumerate(examples):
            self._check_ids(ex.token_ids)
            if ex.loss_mask[0]:
                raise InvalidConfig("the first token has no context and cannot be a target")
            ids[b, : lengths[b]] = ex.token_ids
            for t in np.nonzero(ex.loss_mask)[0]:
                sel_b.append(b)
                sel_t.append(int(t) - 1)
                sel_tok.append(int(ex.token_ids[t]))
                ex_idx.append(b)
        logp = self._graph_forward(ids)
        sel = ad.select(
            logp,
            (
                np.array(sel_b, dtype=np.int64),
                np.array(sel_t, dtype=np.int64),
                np.array(sel_tok, dtype=np.int64),
            ),
        )
        counts = np.array([int(ex.loss_mask.sum()) for ex in examples], dtype=np.float64)
        return sel, np.array(ex_idx, dtype=np.int64), counts

    def sequence_logprob(self, tokens, mask) -> float:
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return 0.0
        self._check_ids(tokens)
        if mask[0]:
            raise InvalidConfig("the first token has no context and cannot be a target")
        _, logits = self._np_forward(tokens)
        logp = _log_softmax_np(logits, axis=-1)
        positions = np.nonzero(mask)[0]
        return float(logp[positions - 1, tokens[positions]].sum())

    def clone(self) -> "NeuralLMPolicy":
        params = {k: t.value.copy() for k, t in self.params.items()}
        return NeuralLMPolicy(self.config, params, seed=self.seed)


def init_neural(config: NeuralConfig, seed: int) -> NeuralLMPolicy:
    """Seeded random initialization: normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    v, e, h, k = config.vocab.size, config.embed_dim, config.hidden_dim, config.context_len
    s = config.init_scale
    params = {
        "tok_emb": s * rng.standard_normal((v, e)),
        "pos_emb": s * rng.standard_normal((k, e)),
        "wq": s * rng.standard_normal((e, e)),
        "wk": s * rng.standard_normal((e, e)),
        "wv": s * rng.standard_normal((e, e)),
        "w1": s * rng.standard_normal((3 * e, h)),
        "b1": np.zeros(h),
        "w2": s * rng.standard_normal((h, h)),
        "b2": np.zeros(h),
        "w3": s * rng.standard_normal((h, v)),
        "b3": np.zeros(v),
    }
    return NeuralLMPolicy(config, params, seed=seed)


# ---------------------------------------------------------------------------
# Shared operations


def logprob(policy, context_tokens, target_tokens, target_mask) -> float:
    """Masked log-probability of targets following a context prefix."""
    context = list(int(t) for t in context_tokens)
    targets = list(int(t) for t in target_tokens)
    mask = [False] * len(context) + [bool(m) for m in target_mask]
    if len(targets) != len(target_mask):
        raise ValueError("target tokens and mask must have the same length")
    return policy.sequence_logprob(np.array(context + targets, dtype=np.int64), np.array(mask, dtype=bool))


def sample(policy, prefix, max_len: int, temperature: float, seed: int) -> list[int]:
    return policy.sample(prefix, max_len, temperature, seed)


def embed(policy, tokens) -> np.ndarray:
    """Mean-pooled final-layer embedding; neural backend only."""
    if getattr(policy, "backend", None) != "neural":
        raise BackendUnsupported("embeddings require the neural backend")
    return policy.embed_tokens(tokens)


class BasePolicy:
    """Immutable snapshot of a policy, used as the pre-trained reference."""

    def __init__(self, policy):
        frozen = policy.clone()
        for tensor in frozen.params.values():
            tensor.value.setflags(write=False)
            tensor.requires_grad = False
        self._policy = frozen

    @property
    def backend(self) -> str:
        return self._policy.backend

    @property
    def params(self) -> dict[str, ad.Tensor]:
        return self._policy.params

    def thaw(self):
        """A fresh mutable policy initialized from this snapshot."""
        return self._policy.clone()

    def next_token_dist(self, prefix, temperature: float = 1.0):
        return self._policy.next_token_dist(prefix, temperature)

    def sample(self, prefix, max_len: int, temperature: float, seed: int):
        return self._policy.sample(prefix, max_len, temperature, seed)

    def sequence_logprob(self, tokens, mask) -> float:
        return self._policy.sequence_logprob(tokens, mask)

    def embed_tokens(self, tokens):
        return embed(self._policy, tokens)

    def conditionals(self):
        if self.backend != "tabular":
            raise BackendUnsupported("conditionals require the tabular backend")
        return self._policy.conditionals()


def pretrain_base(config: NeuralConfig, corpus, seed: int, epochs: int = 100,
                  train_config=None) -> BasePolicy:
    """Unweighted, unconditioned MLE pre-training over a corpus.

    Conversations are rendered with the shared (class-free) labels and
    trained as a plain language model: every token after the first is a
    target, like base-model pre-training and unlike the fine-tuning
    losses, which mask to assistant responses. The result is frozen.
    """
    from .templating import (
        DEFAULT_VARIANT,
        RenderedExample,
        SHARED_CLASS_SPEC,
        render,
        tokenize,
    )
    from .trainer import TrainConfig, fit_examples

    if not corpus:
        raise ValueError("pre-training corpus must be non-empty")
    examples = []
    for conv in corpus:
        ids = np.array(
            tokenize(render(conv, SHARED_CLASS_SPEC, DEFAULT_VARIANT), config.vocab),
            dtype=np.int64,
        )
        mask = np.ones(len(ids), dtype=bool)
        mask[0] = False
        examples.append(RenderedExample(ids, mask, 1.0, conv.source_class))
    if train_config is None:
        train_config = TrainConfig(epochs=epochs, seed=seed, objective="sft",
                                   no_condition=True)
    policy = init_neural(config, seed)
    fit_examples(policy, examples, train_config)
    return BasePolicy(policy)


# ---------------------------------------------------------------------------
# Checkpoints


def _header_for(policy, frozen: bool) -> dict:
    if policy.backend == "neural":
        cfg = policy.config
        config = {
            "symbols": list(cfg.vocab.symbols),
            "embed_dim": cfg.embed_dim,
            "hidden_dim": cfg.hidden_dim,
            "context_len": cfg.context_len,
            "init_scale": cfg.init_scale,
        }
        order = _NEURAL_PARAM_ORDER
    else:
        config = {
            "x_labels": policy.x_labels,
            "c_labels": policy.c_labels,
            "y_labels": policy.y_labels,
        }
        order = _TABULAR_PARAM_ORDER
    return {
        "format_version": CHECKPOINT_VERSION,
        "backend": policy.backend,
        "frozen": frozen,
        "seed": policy.seed,
        "config": config,
        "params": [
            {"name": name, "shape": list(policy.params[name].value.shape)}
            for name in order
        ],
    }


def save_checkpoint(policy_or_base, path: str | Path):
    """Versioned header plus raw float64 payload; byte-deterministic."""
    frozen = isinstance(policy_or_base, BasePolicy)
    policy = policy_or_base._policy if frozen else policy_or_base
    header = _header_for(policy, frozen)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for entry in header["params"]:
            arr = np.ascontiguousarray(policy.params[entry["name"]].value, dtype="<f8")
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path):
    """Exact inverse of save_checkpoint (bitwise-equal parameters)."""
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidConfig(f"unsupported checkpoint version {header.get('format_version')}")
    offset = nl + 1
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise InvalidConfig("checkpoint payload size mismatch")
    cfg = header["config"]
    if header["backend"] == "neural":
        config = NeuralConfig(
            vocab=Vocabulary.from_symbols(cfg["symbols"]),
            embed_dim=cfg["embed_dim"],
            hidden_dim=cfg["hidden_dim"],
            context_len=cfg["context_len"],
            init_scale=cfg["init_scale"],
        )
        policy = NeuralLMPolicy(config, params, seed=header["seed"])
    else:
        policy = TabularPolicy(
            cfg["x_labels"], cfg["c_labels"], cfg["y_labels"],
            params["logits"], seed=header["seed"],
        )
    if header.get("frozen"):
        return BasePolicy(policy)
    return policy
