"""Token models built from blocks, Adam training, metrics and checkpoints.

Model: embedding -> ``depth`` blocks of one mixer kind -> (affine-free
layer norm when ``norm_mode='layernorm'``) -> unembedding.  Gradients are
chained through :func:`block_backward`.
"""
from dataclasses import asdict, dataclass, field
import csv
import json
import math
import struct
import time

import numpy as np

from .errors import CheckpointError, ConfigError, InputError, TrainingError
from .mixer import BlockParams, MixerConfig, block_backward, block_forward, layernorm_backward
from .params import ModelParams, gaussian
from .tasks import DiffuseMqarConfig, SymbolSoupConfig, gen_diffuse_mqar, gen_symbolsoup

BUDGET_TOLERANCE = 0.02
MATCHED_KINDS = ("sessa", "attention", "zoh_ssm")


def _block_class(kind):
    if kind in ("sessa", "sessa_no_feedback"):
        return BlockParams
    from . import baselines

    return {"attention": baselines.AttentionBlockParams, "zoh_ssm": baselines.ZohBlockParams}[kind]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Everything needed to reproduce a training run."""

    task: str = "mqar"
    mixer_kind: str = "sessa"
    depth: int = 2
    D: int = 64
    d_k: int = 16
    vocab_size: int = 64
    T_max: int = 256
    lr: float = 3e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    steps: int = 2000
    batch: int = 16
    seed: int = 0
    norm_mode: str = "layernorm"
    eval_every: int = 100
    n_train: int = 8192
    n_eval: int = 256
    match_budget: bool = True
    task_config: dict = field(default_factory=dict)

    def mixer_config(self, kind=None):
        return MixerConfig(D=self.D, d_k=self.d_k, T_max=self.T_max, norm_mode=self.norm_mode,
                           kind=kind or self.mixer_kind)

    def make_task_config(self):
        kw = dict(self.task_config)
        kw.setdefault("vocab_size", self.vocab_size)
        kw.setdefault("seed", self.seed)
        if self.task == "mqar":
            kw.setdefault("T_max", self.T_max)
            return DiffuseMqarConfig(**kw).validate()
        if self.task == "symbolsoup":
            if "styles_per_family" in kw and isinstance(kw["styles_per_family"], list):
                kw["styles_per_family"] = tuple(kw["styles_per_family"])
            return SymbolSoupConfig(**kw).validate()
        raise ConfigError(f"unknown task {self.task!r}")

    def validate(self):
        if self.depth < 0 or self.steps < 0 or self.batch < 1:
            raise ConfigError("depth and steps must be >= 0 and batch >= 1")
        if not self.lr >= 0 or not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError("invalid optimizer settings")
        self.mixer_config()
        cfg = self.make_task_config()
        if cfg.vocab_size != self.vocab_size:
            raise ConfigError("task vocab_size must equal the model vocab_size")
        if self.match_budget and self.depth > 0:
            rep = budget_report(self)
            if rep["max_rel_diff"] > BUDGET_TOLERANCE:
                raise ConfigError(
                    f"parameter budgets differ by {rep['max_rel_diff']:.2%} across "
                    f"{MATCHED_KINDS} (> {BUDGET_TOLERANCE:.0%}): {rep['counts']}")
        return self

    def to_json(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def model_param_count(cfg, kind=None):
    """Active parameter count of the full model for a mixer kind."""
    kind = kind or cfg.mixer_kind
    from .mixer import _FEEDBACK_FIELDS, param_shapes

    shapes = param_shapes(cfg.mixer_config(kind))
    per_block = sum(int(np.prod(s)) for k, s in shapes.items()
                    if not (kind == "sessa_no_feedback" and k in _FEEDBACK_FIELDS))
    ends = 2 * cfg.vocab_size * cfg.D + cfg.vocab_size
    return ends + cfg.depth * per_block


def budget_report(cfg):
    """Parameter counts for every mixer kind under ``cfg``'s dimensions.

    The matched comparison covers :data:`MATCHED_KINDS`; the no-feedback
    ablation is reported alongside (it drops the feedback branch by design).
    """
    counts = {k: model_param_count(cfg, k) for k in MATCHED_KINDS + ("sessa_no_feedback",)}
    matched = [counts[k] for k in MATCHED_KINDS]
    return {"counts": counts, "max_rel_diff": (max(matched) - min(matched)) / max(matched)}


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class Model:
    """Embedding, a stack of blocks and an unembedding."""

    def __init__(self, ends, blocks, mixer_config, final_norm=True):
        self.ends = ends
        self.blocks = list(blocks)
        self.mixer_config = mixer_config
        self.final_norm = final_norm

    @classmethod
    def init(cls, cfg, rng):
        mc = cfg.mixer_config()
        V, D = cfg.vocab_size, cfg.D
        ends = ModelParams(embed=rng.standard_normal((V, D)), unembed=gaussian(rng, D, (D, V)),
                           unembed_bias=np.zeros(V))
        blocks = [_block_class(mc.kind).init(mc, rng) for _ in range(cfg.depth)]
        return cls(ends, blocks, mc, final_norm=cfg.norm_mode == "layernorm")

    @property
    def vocab_size(self):
        return self.ends.embed.shape[0]

    def parameters(self):
        """Flat ``(name, array)`` list; arrays are the live parameter objects."""
        out = [(k, v) for k, v in self.ends.items()]
        for i, b in enumerate(self.blocks):
            out += [(f"blocks.{i}.{k}", v) for k, v in b.items()]
        return out

    def set_parameters(self, arrays):
        names = [n for n, _ in self.parameters()]
        for name, a in zip(names, arrays):
            if name.startswith("blocks."):
                _, i, k = name.split(".", 2)
                setattr(self.blocks[int(i)], k, a)
            else:
                setattr(self.ends, name, a)

    def num_params(self):
        return int(sum(np.size(v) for _, v in self.parameters()))

    def copy(self):
        return Model(self.ends.copy(), [b.copy() for b in self.blocks], self.mixer_config,
                     self.final_norm)

    def forward(self, tokens, return_cache=False):
        """Logits of shape (B, T, vocab) for integer ``tokens`` (B, T) or (T,)."""
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        tok = tokens[None] if single else tokens
        if tok.size and (tok.min() < 0 or tok.max() >= self.vocab_size):
            raise InputError(f"token ids must lie in [0, {self.vocab_size})")
        h = self.ends.embed[tok]
        caches = []
        for b in self.blocks:
            h, c = block_forward(h, b, self.mixer_config)
            caches.append(c)
        if self.final_norm:
            mu = h.mean(-1, keepdims=True)
            inv = 1.0 / np.sqrt(((h - mu) ** 2).mean(-1, keepdims=True) + self.mixer_config.ln_eps)
            hn = (h - mu) * inv
        else:
            hn, inv = h, None
        logits = hn @ self.ends.unembed + self.ends.unembed_bias
        if return_cache:
            return logits, (tok, caches, hn, inv, single)
        return logits[0] if single else logits

    def loss(self, tokens, mask):
        """Mean cross-entropy and accuracy over positions where ``mask`` is set.

        ``mask[b, p]`` marks ``tokens[b, p]`` as a target predicted from position ``p - 1``.
        """
        logits, cache = self.forward(tokens, return_cache=True)
        tok = cache[0]
        mask = np.asarray(mask, dtype=bool).reshape(tok.shape)
        if mask[:, 0].any():
            raise InputError("position 0 has no prefix to predict it from")
        bi, pi = np.nonzero(mask)
        z = logits[bi, pi - 1]
        z = z - z.max(-1, keepdims=True)
        lse = np.log(np.exp(z).sum(-1))
        tgt = tok[bi, pi]
        nll = lse - z[np.arange(len(tgt)), tgt]
        acc = float(np.mean(np.argmax(z, -1) == tgt)) if len(tgt) else float("nan")
        return float(nll.mean()), acc, (logits, cache, bi, pi, z, lse, tgt)

    def loss_and_grads(self, tokens, mask):
        loss, acc, (logits, cache, bi, pi, z, lse, tgt) = self.loss(tokens, mask)
        tok, caches, hn, inv, _ = cache
        n = len(tgt)
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tgt] -= 1.0
        g_logits = np.zeros_like(logits)
        g_logits[bi, pi - 1] = p / n
        ends_g = self.ends.zeros_like()
        ends_g.unembed = np.einsum("btd,btv->dv", hn, g_logits)
        ends_g.unembed_bias = g_logits.sum(axis=(0, 1))
        g_h = g_logits @ self.ends.unembed.T
        if self.final_norm:
            g_h = layernorm_backward(hn, inv, g_h)
        block_grads = [None] * len(self.blocks)
        for i in range(len(self.blocks) - 1, -1, -1):
            g_h, block_grads[i] = block_backward(caches[i], self.blocks[i], g_h, self.mixer_config)
        np.add.at(ends_g.embed, tok, g_h)
        grads = [v for _, v in ends_g.items()]
        for bg in block_grads:
            grads += [v for _, v in bg.items()]
        return loss, acc, grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class Adam:
    """Adam with bias correction and optional global-norm clipping."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, grad_clip=None):
        self.lr, self.betas, self.eps, self.grad_clip = lr, betas, eps, grad_clip
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Return updated parameter arrays (inputs are left untouched)."""
        self.t += 1
        b1, b2 = self.betas
        scale = 1.0
        if self.grad_clip:
            gn = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if gn > self.grad_clip:
                scale = self.grad_clip / gn
        out = []
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            g = g * scale
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            out.append(np.asarray(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)))
        return out


# --------------------------------------------------------------------------
# data, evaluation, training loop
# --------------------------------------------------------------------------

def make_dataset(cfg, split, n):
    tc = cfg.make_task_config()
    if cfg.task == "mqar":
        return gen_diffuse_mqar(tc, n, split)
    return gen_symbolsoup(tc, n, split)


def evaluate(model, ds, batch=64):
    """Mean loss and accuracy over every supervised position of ``ds``."""
    mask = ds.target_mask()
    tot_l = tot_a = 0.0
    tot_n = 0
    for s in range(0, len(ds), batch):
        m = mask[s:s + batch]
        k = int(m.sum())
        l, a, _ = model.loss(ds.tokens[s:s + batch], m)
        tot_l += l * k
        tot_a += a * k
        tot_n += k
    return tot_l / tot_n, tot_a / tot_n


@dataclass
class TrainResult:
    history: list                 # rows (step, split, loss, accuracy)
    model: Model
    config: TrainConfig
    initial_loss: float
    final_loss: float
    seconds: float
    rng_state: dict = field(default_factory=dict)

    def rows(self, split=None):
        return [r for r in self.history if split is None or r[1] == split]


def train(cfg, log=None):
    """Train a model under ``cfg``; deterministic for a fixed seed and thread count.

    The ``train`` rows of the history are minibatch losses averaged over the
    preceding interval (the step-0 row is the loss before any update); the
    ``val`` rows evaluate a held-out set with the training lag range.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    model = Model.init(cfg, rng)
    data = make_dataset(cfg, "train", cfg.n_train)
    val = make_dataset(cfg, "val", cfg.n_eval)
    mask = data.target_mask()
    params = [v for _, v in model.parameters()]
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps, cfg.grad_clip)
    history = []
    t0 = time.time()
    idx = rng.integers(0, len(data), cfg.batch)
    l0, a0, _ = model.loss(data.tokens[idx], mask[idx])
    history.append((0, "train", l0, a0))
    history.append((0, "val", *evaluate(model, val)))
    run_l, run_a, run_n = [], [], 0
    final = l0
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), cfg.batch)
        loss, acc, grads = model.loss_and_grads(data.tokens[idx], mask[idx])
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingError(f"non-finite loss or gradient at step {step}", step=step)
        params = opt.step(params, grads)
        model.set_parameters(params)
        run_l.append(loss)
        run_a.append(acc)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            final = float(np.mean(run_l))
            history.append((step, "train", final, float(np.mean(run_a))))
            history.append((step, "val", *evaluate(model, val)))
            if log:
                log(f"step {step}: train {history[-2][2]:.4f} val {history[-1][2]:.4f} "
                    f"acc {history[-1][3]:.3f}")
            run_l, run_a = [], []
    return TrainResult(history, model, cfg, l0, final, time.time() - t0,
                       rng.bit_generator.state)


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "split", "loss", "accuracy"])
        for step, split, loss, acc in history:
            w.writerow([step, split, repr(float(loss)), repr(float(acc))])


# --------------------------------------------------------------------------
# checkpoints: magic, version, header length, JSON header, f64 LE blob
# --------------------------------------------------------------------------

CKPT_MAGIC = b"SLCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    rng_state: dict
    model: Model


def save_checkpoint(path, model, cfg, step=0, rng_state=None):
    index, blobs, off = [], [], 0
    for name, a in model.parameters():
        a = np.asarray(a, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        index.append({"name": name, "shape": list(a.shape), "offset": off, "count": int(a.size)})
        blobs.append(a.tobytes())
        off += int(a.size)
    header = {"format": "sessa-lab-checkpoint", "version": CKPT_VERSION, "config": cfg.to_json(),
              "step": int(step), "rng_state": rng_state or {}, "index": index, "n_values": off}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + b"".join(blobs))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    if 16 + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[16:16 + hlen].decode())
        cfg = TrainConfig.from_json(header["config"])
        index, n_values = header["index"], int(header["n_values"])
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointError(f"corrupted checkpoint header: {err}") from None
    blob = data[16 + hlen:]
    if len(blob) != 8 * n_values or sum(e["count"] for e in index) != n_values:
        raise CheckpointError(
            f"blob holds {len(blob) // 8} values but the index declares {n_values}")
    values = np.frombuffer(blob, dtype="<f8")
    cfg.match_budget = False  # the saved config was validated when it was trained
    model = Model.init(cfg, np.random.default_rng(0))
    expected = [n for n, _ in model.parameters()]
    if [e["name"] for e in index] != expected:
        raise CheckpointError("checkpoint tensors do not match the model layout")
    arrays = []
    for e, (_, ref) in zip(index, model.parameters()):
        if tuple(e["shape"]) != np.shape(ref) or int(np.prod(e["shape"])) != e["count"]:
            raise CheckpointError(f"shape mismatch for {e['name']}")
        arrays.append(values[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64))
    model.set_parameters(arrays)
    cfg.match_budget = header["config"].get("match_budget", True)
    return Checkpoint(cfg, header["step"], header["rng_state"], model)
