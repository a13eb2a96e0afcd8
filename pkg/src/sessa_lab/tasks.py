"""Synthetic sequence tasks: SymbolSoup and Diffuse MQAR.

Token layout shared by both tasks: ids 0..3 are reserved for
``<sep>``, ``<sep1>``, ``<sep2>`` and ``<pad>``; content symbols follow and
SymbolSoup labels occupy the tail of the vocabulary.

A dataset is a fixed-length split: ``tokens`` (n, T) plus, per sequence,
the positions whose token is supervised and the lag between the query and
the evidence it needs.  Logits at position ``p - 1`` predict ``tokens[p]``.
"""
from dataclasses import asdict, dataclass, field
import json
import struct

import numpy as np

from .errors import ConfigError, InputError

SEP, SEP1, SEP2, PAD = 0, 1, 2, 3
# "val" is a held-out stream with the train layout; "test" stretches the lags
SPLITS = {"train": 0, "test": 1, "val": 2}
N_RESERVED = 4

DATASET_MAGIC = b"SLTK"
DATASET_VERSION = 1


@dataclass
class TokenDataset:
    """Token sequences of one split with their supervised positions."""

    tokens: np.ndarray                  # (n, T) int64
    targets: list                       # per sequence: int array of supervised positions
    lags: list                          # per sequence: int array, same length as targets
    task: str = ""
    split: str = "train"
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tokens)

    @property
    def T(self):
        return self.tokens.shape[1]

    def target_mask(self):
        """Boolean (n, T) mask over supervised token positions."""
        m = np.zeros(self.tokens.shape, dtype=bool)
        for i, pos in enumerate(self.targets):
            m[i, pos] = True
        return m

    def max_lag(self):
        return int(max((l.max() for l in self.lags if len(l)), default=0))

    def batch(self, idx):
        idx = np.asarray(idx)
        return self.tokens[idx], self.target_mask()[idx]


# --------------------------------------------------------------------------
# SymbolSoup
# --------------------------------------------------------------------------

@dataclass
class SymbolSoupConfig:
    """Two informative stylized blocks hidden in label-independent noise.

    ``styles_per_family`` is an int or one size per family; the label is
    the ordered pair (style of family 0, style of family 1).
    """

    vocab_size: int = 64
    noise_block_len: int = 16
    style_block_len: int = 12
    n_style_families: int = 2
    styles_per_family: object = (4, 5)
    motif_rate: float = 1.0
    symbol_noise_rate: float = 0.05
    seed: int = 0

    def family_sizes(self):
        s = self.styles_per_family
        sizes = (s,) * self.n_style_families if isinstance(s, int) else tuple(int(v) for v in s)
        if len(sizes) != self.n_style_families:
            raise ConfigError("styles_per_family must give one size per family")
        return sizes

    @property
    def n_labels(self):
        return int(np.prod(self.family_sizes()))

    @property
    def chance(self):
        return 1.0 / self.n_labels

    @property
    def n_symbols(self):
        return self.vocab_size - N_RESERVED - self.n_labels

    @property
    def seq_len(self):
        return 3 * self.noise_block_len + 2 * self.style_block_len + 6

    def validate(self):
        if self.n_style_families != 2:
            raise ConfigError("SymbolSoup uses exactly two style families")
        if min(self.family_sizes()) < 1:
            raise ConfigError("each family needs at least one style")
        if self.n_symbols < 4:
            raise ConfigError(
                f"vocab_size={self.vocab_size} too small for {N_RESERVED} separators, "
                f"{self.n_labels} labels and at least 4 symbols")
        if self.noise_block_len < 0 or self.style_block_len < 1:
            raise ConfigError("block lengths must be non-negative (style blocks positive)")
        if not (0 <= self.symbol_noise_rate <= 1) or self.motif_rate < 0:
            raise ConfigError("rates out of range")
        return self

    def label_token(self, label):
        return self.vocab_size - self.n_labels + int(label)


@dataclass
class _Style:
    unigram: np.ndarray      # logits over symbols
    bigram: np.ndarray       # (S, S) bonus added to the unigram logits
    motif: np.ndarray        # 3 symbol indices


def _make_styles(cfg):
    rng = np.random.default_rng([cfg.seed, 0x5717])
    S = cfg.n_symbols
    fams = []
    for size in cfg.family_sizes():
        fam = []
        for _ in range(size):
            uni = 2.0 * rng.standard_normal(S)
            bi = np.zeros((S, S))
            bi[np.arange(S), rng.integers(0, S, S)] = 3.0
            fam.append(_Style(uni, bi, rng.integers(0, S, 3)))
        fams.append(fam)
    return fams


def _sample_style_block(rng, style, n, cfg):
    S = len(style.unigram)
    out = np.empty(n, dtype=np.int64)
    prev = None
    for i in range(n):
        logit = style.unigram if prev is None else style.unigram + style.bigram[prev]
        p = np.exp(logit - logit.max())
        out[i] = prev = rng.choice(S, p=p / p.sum())
    for _ in range(rng.poisson(cfg.motif_rate) if cfg.motif_rate > 0 else 0):
        if n >= 3:
            at = rng.integers(0, n - 2)
            out[at:at + 3] = style.motif
    if cfg.symbol_noise_rate > 0:
        flip = rng.random(n) < cfg.symbol_noise_rate
        out[flip] = rng.integers(0, S, int(flip.sum()))
    return out


def gen_symbolsoup(cfg, n, split="train"):
    """Generate ``n`` labelled sequences; labels are class balanced."""
    cfg.validate()
    if n < 1:
        raise ConfigError("n must be positive")
    fams = _make_styles(cfg)
    sizes = cfg.family_sizes()
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    rng = np.random.default_rng([cfg.seed, SPLITS[split]])
    labels = rng.permutation(np.arange(n) % cfg.n_labels)
    T = cfg.seq_len
    toks = np.empty((n, T), dtype=np.int64)
    off = N_RESERVED
    for i, lab in enumerate(labels):
        s0, s1 = divmod(int(lab), sizes[1])
        blocks = [_sample_style_block(rng, fams[0][s0], cfg.style_block_len, cfg),
                  _sample_style_block(rng, fams[1][s1], cfg.style_block_len, cfg)]
        if rng.random() < 0.5:
            blocks.reverse()
        noise = [rng.integers(0, cfg.n_symbols, cfg.noise_block_len) for _ in range(3)]
        seq = np.concatenate([noise[0] + off, [SEP1], blocks[0] + off, [SEP2],
                              noise[1] + off, [SEP1], blocks[1] + off, [SEP2],
                              noise[2] + off, [SEP], [cfg.label_token(lab)]])
        toks[i] = seq
    targets = [np.array([T - 1])] * n
    lags = [np.array([T - 1 - cfg.noise_block_len - 1 - cfg.style_block_len])] * n
    return TokenDataset(toks, targets, lags, "symbolsoup", split, asdict(cfg))


# --------------------------------------------------------------------------
# Diffuse MQAR
# --------------------------------------------------------------------------

@dataclass
class DiffuseMqarConfig:
    """Multi-query associative recall with multi-token keys and distractors.

    Layout: memory block of ``n_pairs`` (key, value) records, a noise block
    holding ``n_distractors`` records whose keys share a prefix with a true
    key, ``<sep>``, then a query block repeating every true key (shuffled)
    followed by its value.  The test split stretches the noise block so its
    maximum lag is ``test_lag_multiplier`` times the train maximum.
    """

    vocab_size: int = 64
    key_len: int = 2
    n_pairs: int = 4
    noise_len: int = 40
    distractor_shared_prefix_len: int = 1
    n_distractors: int = 2
    train_max_lag: int = 0          # 0: implied by noise_len
    test_lag_multiplier: int = 4
    T_max: int = 256
    seed: int = 0

    @property
    def record_len(self):
        return self.key_len + 1

    @property
    def n_key_symbols(self):
        return (self.vocab_size - N_RESERVED) // 2

    @property
    def value_range(self):
        lo = N_RESERVED + self.n_key_symbols
        return lo, self.vocab_size

    def _fixed_len(self):
        return 2 * self.n_pairs * self.record_len + 1

    def noise_for(self, split):
        if split != "test":
            if self.train_max_lag:
                return self.train_max_lag + 1 + self.key_len - self._fixed_len()
            return self.noise_len
        lag = self.test_lag_multiplier * self.max_lag("train")
        return lag + 1 + self.key_len - self._fixed_len()

    def seq_len(self, split="train"):
        return self._fixed_len() + self.noise_for(split)

    def max_lag(self, split="train"):
        # first memory value to the last query value
        train = self.seq_len("train") - 1 - self.key_len
        return self.test_lag_multiplier * train if split == "test" else train

    def validate(self):
        if self.key_len < 2:
            raise ConfigError("Diffuse MQAR needs multi-token keys (key_len >= 2)")
        if self.n_pairs < 1:
            raise ConfigError("need at least one key-value pair")
        if not 1 <= self.distractor_shared_prefix_len < self.key_len:
            raise ConfigError("distractor prefix must be shorter than the key and at least 1")
        if self.n_key_symbols < 2 or self.value_range[1] - self.value_range[0] < 2:
            raise ConfigError(f"vocab_size={self.vocab_size} too small")
        if self.n_key_symbols ** self.key_len < self.n_pairs + self.n_distractors:
            raise ConfigError("key space too small for distinct keys")
        for split in ("train", "test"):
            nl = self.noise_for(split)
            if nl < 0 or nl < self.n_distractors * self.record_len:
                raise ConfigError(f"noise block of the {split} split cannot hold the distractors")
            if self.seq_len(split) > self.T_max:
                raise ConfigError(
                    f"{split} layout needs {self.seq_len(split)} tokens > T_max={self.T_max}")
        if self.train_max_lag and self.train_max_lag < self.n_pairs * self.record_len:
            raise ConfigError("train_max_lag too small for the layout")
        return self


def gen_diffuse_mqar(cfg, n, split="train"):
    """Generate ``n`` sequences of the given split (``train``, ``val`` or ``test``)."""
    cfg.validate()
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    if n < 1:
        raise ConfigError("n must be positive")
    rng = np.random.default_rng([cfg.seed, SPLITS[split]])
    K, L, P = cfg.n_key_symbols, cfg.key_len, cfg.n_pairs
    v_lo, v_hi = cfg.value_range
    noise_len = cfg.noise_for(split)
    T = cfg.seq_len(split)
    toks = np.empty((n, T), dtype=np.int64)
    targets, lags = [], []
    mem_end = P * cfg.record_len
    q0 = mem_end + noise_len + 1
    for i in range(n):
        keys = set()
        while len(keys) < P:
            keys.add(tuple(rng.integers(0, K, L)))
        keys = [np.array(k) for k in keys]
        vals = rng.integers(v_lo, v_hi, P)
        seq = np.empty(T, dtype=np.int64)
        for p in range(P):
            seq[p * cfg.record_len:p * cfg.record_len + L] = keys[p] + N_RESERVED
            seq[p * cfg.record_len + L] = vals[p]
        noise = rng.integers(N_RESERVED, v_hi, noise_len)
        slots = rng.choice(noise_len // cfg.record_len, cfg.n_distractors, replace=False)
        true = {tuple(k) for k in keys}
        for s in slots:
            base = keys[rng.integers(P)]
            while True:
                d = base.copy()
                d[cfg.distractor_shared_prefix_len:] = rng.integers(0, K, L - cfg.distractor_shared_prefix_len)
                if tuple(d) not in true:
                    break
            at = s * cfg.record_len
            noise[at:at + L] = d + N_RESERVED
            noise[at + L] = rng.integers(v_lo, v_hi)
        seq[mem_end:mem_end + noise_len] = noise
        seq[q0 - 1] = SEP
        order = rng.permutation(P)
        tpos, tlag = [], []
        for j, p in enumerate(order):
            at = q0 + j * cfg.record_len
            seq[at:at + L] = keys[p] + N_RESERVED
            seq[at + L] = vals[p]
            tpos.append(at + L)
            tlag.append(at + L - (p * cfg.record_len + L))
        toks[i] = seq
        targets.append(np.array(tpos))
        lags.append(np.array(tlag))
    return TokenDataset(toks, targets, lags, "mqar", split, asdict(cfg))


# --------------------------------------------------------------------------
# dataset files: u32 little-endian, length-prefixed, with a JSON sidecar
# --------------------------------------------------------------------------

def _sidecar(path):
    return str(path) + ".json"


def save_dataset(path, ds):
    """Write ``ds`` as ``magic, version, n`` then per sequence
    ``len, tokens[len], n_targets, positions[n_targets], lags[n_targets]``."""
    if np.any(ds.tokens < 0) or np.any(ds.tokens >= 2 ** 32):
        raise InputError("token ids must fit in u32")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(ds)))
        for row, pos, lag in zip(ds.tokens, ds.targets, ds.lags):
            fh.write(struct.pack("<I", len(row)))
            fh.write(np.asarray(row, dtype="<u4").tobytes())
            fh.write(struct.pack("<I", len(pos)))
            fh.write(np.asarray(pos, dtype="<u4").tobytes())
            fh.write(np.asarray(lag, dtype="<u4").tobytes())
    with open(_sidecar(path), "w") as fh:
        json.dump({"task": ds.task, "split": ds.split, "n": len(ds), "T": ds.T,
                   "version": DATASET_VERSION, "config": ds.config}, fh, indent=2, sort_keys=True)


def load_dataset(path):
    with open(path, "rb") as fh:
        data = fh.read()
    with open(_sidecar(path)) as fh:
        meta = json.load(fh)
    if data[:4] != DATASET_MAGIC:
        raise InputError("not a token dataset file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != DATASET_VERSION:
        raise InputError(f"dataset version {version} unsupported")
    off, rows, targets, lags = 12, [], [], []

    def take(k):
        nonlocal off
        if off + 4 * k > len(data):
            raise InputError("truncated dataset file")
        a = np.frombuffer(data, dtype="<u4", count=k, offset=off).astype(np.int64)
        off += 4 * k
        return a

    for _ in range(n):
        rows.append(take(int(take(1)[0])))
        m = int(take(1)[0])
        targets.append(take(m))
        lags.append(take(m))
    if off != len(data):
        raise InputError("trailing bytes in dataset file")
    if len({len(r) for r in rows}) > 1:
        raise InputError("ragged dataset: all sequences of a split share one length")
    return TokenDataset(np.stack(rows), targets, lags, meta["task"], meta["split"], meta["config"])


def random_guess_accuracy(vocab_size):
    return 1.0 / vocab_size


def chance_accuracy(cfg):
    """Chance accuracy of the supervised targets under the task's label space."""
    if isinstance(cfg, SymbolSoupConfig):
        return cfg.chance
    return random_guess_accuracy(cfg.vocab_size)
