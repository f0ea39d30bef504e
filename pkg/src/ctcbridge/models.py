"""Trainable toy networks and the two training loops.

The speech encoder subsamples frames by 4 (two stride-2 convolution
stages), mixes with per-frame MLP + single-head self-attention blocks, and
ends in a linear layer over the V+1 output slots.  The decoder is a causal
transformer whose embedding table doubles as the reconstruction codebook;
the blank row (index V) takes part in reconstruction only, never in the
output softmax.  Input and output embeddings are tied by default
(`DecoderConfig.tie_output`).

Two loops: CTC-train the encoder, then adapt the decoder against a frozen
encoder under one of the connection modes:

  lego / lego_star   posterior-weighted reconstruction (star forces
                     blank downscale 1e4)
  topS / topP        sparsified reconstruction variants
  adapter            reconstruction through a fresh table (vocab mismatch)
  sp                 linear projection of encoder hidden states
  aec                n-best hypotheses as text input, "<sep>"-joined

The frozen encoder runs off-tape during adaptation, so its parameters
cannot drift by construction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as tt
from .connector import ConnectorConfig, reconstruct
from .ctc import NBestList, ctc_loss
from .lexicon import LogitGram, TokenSeq, Vocabulary
from .metrics import WerReport, corpus_wer
from .rng import CounterRng
from .synthdata import MaskConfig, Utterance, augment

ADAPT_MODES = ("lego", "lego_star", "topS", "topP", "adapter", "sp", "aec")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class EncoderConfig:
    feat_dim: int
    out_slots: int  # V + 1
    width: int = 48
    ffn: int = 96
    blocks: int = 2


@dataclass(frozen=True)
class DecoderConfig:
    vocab: int  # V; the embedding table has V + 1 rows
    dim: int = 64
    ffn: int = 128
    blocks: int = 2
    heads: int = 4
    max_len: int = 192
    tie_output: bool = True
    # the table doubles as the reconstruction codebook, so its initial norm
    # sets the speech-signal strength relative to positional embeddings
    emb_scale: float = 0.3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 50
    dropout: float = 0.0
    augment: Optional[MaskConfig] = MaskConfig()
    seed: int = 0
    eval_every: int = 250
    log_every: int = 50
    dev_subset: int = 100


# ---------------------------------------------------------------------------
# parameter plumbing


def _init(rng: CounterRng, name: str, shape: tuple[int, ...], scale: float) -> tt.Parameter:
    vals = rng.child(name).normals(int(np.prod(shape))).reshape(shape) * scale
    return tt.Parameter(vals, name=name)


def _const(rng: CounterRng, name: str, shape, value: float) -> tt.Parameter:
    return tt.Parameter(np.full(shape, value, dtype=np.float64), name=name)


def _w(params: dict[str, tt.Parameter], name: str, tape) -> tt.Tensor:
    p = params[name]
    return tape.watch(p) if tape is not None else tt.Tensor(p.value)


def params_digest(params: dict[str, tt.Parameter]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].value.tobytes())
    return h.hexdigest()


def _mix_block(x: tt.Tensor, params, prefix: str, tape, causal: bool,
               drop_rate: float, drop_rng, heads: int = 1) -> tt.Tensor:
    # attention output is a sum over heads of (att_h @ v_h) @ Wo_h, which is
    # the usual concat-then-project written without column concatenation
    head_dim = x.shape[1] // heads
    scale = 1.0 / math.sqrt(head_dim)
    mask = tt.causal_mask(x.shape[0]) if causal else None
    h = tt.layer_norm(x, _w(params, f"{prefix}.ln1g", tape), _w(params, f"{prefix}.ln1b", tape))
    o = None
    for j in range(heads):
        q = tt.matmul(h, _w(params, f"{prefix}.h{j}.wq", tape))
        k = tt.matmul(h, _w(params, f"{prefix}.h{j}.wk", tape))
        v = tt.matmul(h, _w(params, f"{prefix}.h{j}.wv", tape))
        scores = tt.mul(tt.matmul(q, tt.transpose(k)), scale)
        if mask is not None:
            scores = tt.add(scores, mask)
        att = tt.softmax(scores)
        part = tt.matmul(tt.matmul(att, v), _w(params, f"{prefix}.h{j}.wo", tape))
        o = part if o is None else tt.add(o, part)
    if drop_rate > 0:
        o = tt.dropout(o, drop_rate, drop_rng)
    x = tt.add(x, o)
    h2 = tt.layer_norm(x, _w(params, f"{prefix}.ln2g", tape), _w(params, f"{prefix}.ln2b", tape))
    m = tt.add(tt.matmul(h2, _w(params, f"{prefix}.w1", tape)), _w(params, f"{prefix}.b1", tape))
    m = tt.add(tt.matmul(tt.relu(m), _w(params, f"{prefix}.w2", tape)), _w(params, f"{prefix}.b2", tape))
    if drop_rate > 0:
        m = tt.dropout(m, drop_rate, drop_rng)
    return tt.add(x, m)


def _block_params(params, rng, prefix, width, ffn, heads: int = 1):
    if width % heads:
        raise ValueError("width must be divisible by the head count")
    head_dim = width // heads
    params[f"{prefix}.ln1g"] = _const(rng, f"{prefix}.ln1g", (width,), 1.0)
    params[f"{prefix}.ln1b"] = _const(rng, f"{prefix}.ln1b", (width,), 0.0)
    for j in range(heads):
        for nm, shape in (("wq", (width, head_dim)), ("wk", (width, head_dim)),
                          ("wv", (width, head_dim)), ("wo", (head_dim, width))):
            params[f"{prefix}.h{j}.{nm}"] = _init(
                rng, f"{prefix}.h{j}.{nm}", shape, 1.0 / math.sqrt(shape[0])
            )
    params[f"{prefix}.ln2g"] = _const(rng, f"{prefix}.ln2g", (width,), 1.0)
    params[f"{prefix}.ln2b"] = _const(rng, f"{prefix}.ln2b", (width,), 0.0)
    params[f"{prefix}.w1"] = _init(rng, f"{prefix}.w1", (width, ffn), 1.0 / math.sqrt(width))
    params[f"{prefix}.b1"] = _const(rng, f"{prefix}.b1", (ffn,), 0.0)
    params[f"{prefix}.w2"] = _init(rng, f"{prefix}.w2", (ffn, width), 1.0 / math.sqrt(ffn))
    params[f"{prefix}.b2"] = _const(rng, f"{prefix}.b2", (width,), 0.0)


# ---------------------------------------------------------------------------
# speech encoder


class SpeechEncoder:
    """Stride-4 subsampler, mixing blocks, linear output over V+1 slots."""

    SUBSAMPLE = 4

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = CounterRng(seed, stream=0xE4C0)
        p: dict[str, tt.Parameter] = {}
        p["conv1.w"] = _init(rng, "conv1.w", (3 * cfg.feat_dim, cfg.width), 1.0 / math.sqrt(3 * cfg.feat_dim))
        p["conv1.b"] = _const(rng, "conv1.b", (cfg.width,), 0.0)
        p["conv2.w"] = _init(rng, "conv2.w", (3 * cfg.width, cfg.width), 1.0 / math.sqrt(3 * cfg.width))
        p["conv2.b"] = _const(rng, "conv2.b", (cfg.width,), 0.0)
        for i in range(cfg.blocks):
            _block_params(p, rng, f"blk{i}", cfg.width, cfg.ffn, heads=1)
        p["lnog"] = _const(rng, "lnog", (cfg.width,), 1.0)
        p["lnob"] = _const(rng, "lnob", (cfg.width,), 0.0)
        p["out.w"] = _init(rng, "out.w", (cfg.width, cfg.out_slots), 1.0 / math.sqrt(cfg.width))
        self.params = p

    @staticmethod
    def out_frames(t: int) -> int:
        return -(-t // SpeechEncoder.SUBSAMPLE)  # ceil(t / 4)

    def _conv(self, x: tt.Tensor, prefix: str, tape) -> tt.Tensor:
        t, c = x.shape
        zero = tt.Tensor(np.zeros((1, c), dtype=np.float32))
        padded = tt.concat_rows([zero, x, zero])
        t_out = (t + 2 - 3) // 2 + 1  # == ceil(t / 2)
        rows = (np.arange(t_out)[:, None] * 2 + np.arange(3)[None, :]).reshape(-1)
        windows = tt.reshape(tt.gather_rows(padded, rows), (t_out, 3 * c))
        y = tt.add(tt.matmul(windows, _w(self.params, f"{prefix}.w", tape)),
                   _w(self.params, f"{prefix}.b", tape))
        return tt.relu(y)

    def forward(self, frames: np.ndarray, tape=None, drop_rate: float = 0.0,
                drop_rng=None) -> tuple[tt.Tensor, tt.Tensor]:
        """Returns (hidden [T', width], logits [T', V+1]); T' = ceil(T/4)."""
        if frames.shape[0] < self.SUBSAMPLE:
            raise ValueError(f"need at least {self.SUBSAMPLE} input frames, got {frames.shape[0]}")
        if frames.shape[1] != self.cfg.feat_dim:
            raise ValueError("feature dimension mismatch")
        x = self._conv(tt.Tensor(frames), "conv1", tape)
        x = self._conv(x, "conv2", tape)
        for i in range(self.cfg.blocks):
            x = _mix_block(x, self.params, f"blk{i}", tape, causal=False,
                           drop_rate=drop_rate, drop_rng=drop_rng, heads=1)
        hidden = tt.layer_norm(x, _w(self.params, "lnog", tape), _w(self.params, "lnob", tape))
        logits = tt.matmul(hidden, _w(self.params, "out.w", tape))
        return hidden, logits

    def logitgram(self, frames: np.ndarray) -> LogitGram:
        return LogitGram(self.forward(frames)[1])


# ---------------------------------------------------------------------------
# decoder LM


class DecoderLM:
    """Causal transformer over (speech embeddings ++ text embeddings)."""

    def __init__(self, cfg: DecoderConfig, vocab: Vocabulary, seed: int):
        if cfg.vocab != vocab.size:
            raise ValueError("decoder config vocab does not match vocabulary")
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed
        rng = CounterRng(seed, stream=0xD3C0)
        p: dict[str, tt.Parameter] = {}
        p["emb"] = _init(rng, "emb", (cfg.vocab + 1, cfg.dim), cfg.emb_scale)  # +1: blank row
        p["pos"] = _init(rng, "pos", (cfg.max_len, cfg.dim), 0.02)
        for i in range(cfg.blocks):
            _block_params(p, rng, f"blk{i}", cfg.dim, cfg.ffn, heads=cfg.heads)
        p["lnfg"] = _const(rng, "lnfg", (cfg.dim,), 1.0)
        p["lnfb"] = _const(rng, "lnfb", (cfg.dim,), 0.0)
        if not cfg.tie_output:
            p["out.w"] = _init(rng, "out.w", (cfg.dim, cfg.vocab), 1.0 / math.sqrt(cfg.dim))
        self.params = p

    def embedding(self, tape=None) -> tt.Tensor:
        return _w(self.params, "emb", tape)

    def forward(self, speech: Optional[tt.Tensor], text_ids: Sequence[int],
                tape=None, drop_rate: float = 0.0, drop_rng=None) -> tt.Tensor:
        """Next-token logits over V for every text position.

        `speech` is a [S, d] prefix (already in embedding space) visible to
        every text position; text attends causally within itself.
        """
        ids = np.asarray(text_ids, dtype=np.intp)
        if ids.size == 0:
            raise ValueError("text must be non-empty")
        if ids[0] != self.vocab.bos_id:
            raise ValueError("text must begin with <bos>")
        if ids.max() >= self.cfg.vocab or ids.min() < 0:
            raise ValueError("text id outside [0, V)")
        s = 0 if speech is None else speech.shape[0]
        total = s + ids.size
        if total > self.cfg.max_len:
            raise ValueError(f"sequence length {total} exceeds max_len {self.cfg.max_len}")

        emb = self.embedding(tape)
        text_emb = tt.gather_rows(emb, ids)
        seq = text_emb if speech is None else tt.concat_rows([speech, text_emb])
        pos = tt.slice_rows(_w(self.params, "pos", tape), 0, total)
        x = tt.add(seq, pos)
        for i in range(self.cfg.blocks):
            x = _mix_block(x, self.params, f"blk{i}", tape, causal=True,
                           drop_rate=drop_rate, drop_rng=drop_rng, heads=self.cfg.heads)
        h = tt.layer_norm(x, _w(self.params, "lnfg", tape), _w(self.params, "lnfb", tape))
        h_text = tt.slice_rows(h, s, total)
        if self.cfg.tie_output:
            out_w = tt.transpose(tt.slice_rows(emb, 0, self.cfg.vocab))
        else:
            out_w = _w(self.params, "out.w", tape)
        return tt.matmul(h_text, out_w)


def sp_project(hidden: tt.Tensor, proj: tt.Tensor) -> tt.Tensor:
    """Linear map from encoder hidden states into the LM embedding space."""
    return tt.matmul(hidden, proj)


def aec_build_input(nbest: NBestList, n: int, vocab: Vocabulary) -> TokenSeq:
    """Top-n hypotheses in score order, "<sep>"-joined."""
    if not nbest.hypotheses:
        raise ValueError("n-best list is empty")
    if n > len(nbest.hypotheses):
        raise ValueError(f"asked for {n} hypotheses, list holds {len(nbest.hypotheses)}")
    out: list[int] = []
    for i, (hyp, _) in enumerate(nbest.hypotheses[:n]):
        if i:
            out.append(vocab.sep_id)
        out.extend(hyp)
    return tuple(out)


# ---------------------------------------------------------------------------
# the decode-side bundle


@dataclass
class DecoderSystem:
    """Decoder plus everything its connection mode needs at run time."""

    decoder: DecoderLM
    mode: str
    conn: ConnectorConfig
    sp_proj: Optional[tt.Parameter] = None
    topp_proj: Optional[tt.Parameter] = None
    adapter: Optional[tt.Parameter] = None
    aec_n: int = 1
    prompt_id: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ADAPT_MODES:
            raise ValueError(f"unknown adaptation mode {self.mode!r}")

    def extra_params(self) -> dict[str, tt.Parameter]:
        out = {}
        if self.sp_proj is not None:
            out["sp.proj"] = self.sp_proj
        if self.topp_proj is not None:
            out["topp.proj"] = self.topp_proj
        if self.adapter is not None:
            out["adapter.table"] = self.adapter
        return out


def resolve_connector(mode: str, conn: ConnectorConfig) -> ConnectorConfig:
    """Adaptation mode -> concrete connector config (lego_star pins 1e4)."""
    if mode == "lego":
        return replace(conn, mode="full")
    if mode == "lego_star":
        return replace(conn, mode="full", blk_downscale=1.0e4)
    if mode == "topS":
        return replace(conn, mode="topS")
    if mode == "topP":
        return replace(conn, mode="topP")
    if mode == "adapter":
        return replace(conn, mode="adapter")
    return conn  # sp / aec do not use the connector


def build_system(mode: str, enc: SpeechEncoder, dec: DecoderLM,
                 conn: ConnectorConfig = ConnectorConfig(), seed: int = 0,
                 aec_n: int = 1, prompt_id: Optional[int] = None) -> DecoderSystem:
    """Create the decoder-side bundle, initialising mode-specific parameters."""
    if mode not in ADAPT_MODES:
        raise ValueError(f"unknown adaptation mode {mode!r}")
    conn = resolve_connector(mode, conn)
    rng = CounterRng(seed, stream=0xE27A)
    sys = DecoderSystem(decoder=dec, mode=mode, conn=conn, aec_n=aec_n, prompt_id=prompt_id)
    d = dec.cfg.dim
    if mode == "sp":
        sys.sp_proj = _init(rng, "sp.proj", (enc.cfg.width, d), 1.0 / math.sqrt(enc.cfg.width))
    if mode == "topP":
        if conn.k is None:
            raise ValueError("topP needs k")
        sys.topp_proj = _init(rng, "topp.proj", (conn.k * d, d), 1.0 / math.sqrt(conn.k * d))
    if mode == "adapter":
        sys.adapter = _init(rng, "adapter.table", (enc.cfg.out_slots, d), 0.02)
    return sys


def encoder_readout(sys_mode: str, enc: SpeechEncoder, frames: np.ndarray) -> np.ndarray:
    """What the connection mode consumes: hidden states for sp, logits otherwise."""
    hidden, logits = enc.forward(frames)
    return hidden.data if sys_mode == "sp" else logits.data


class EncoderOutputCache:
    """Per-utterance frozen-encoder outputs; valid only without augmentation."""

    def __init__(self, enc: SpeechEncoder, mode: str):
        self.enc = enc
        self.mode = mode
        self._data: dict[str, np.ndarray] = {}

    def get(self, utt: Utterance) -> np.ndarray:
        out = self._data.get(utt.id)
        if out is None:
            out = encoder_readout(self.mode, self.enc, utt.frames)
            self._data[utt.id] = out
        return out


def conditioning(sys: DecoderSystem, enc: SpeechEncoder, frames: np.ndarray,
                 tape=None, at_inference: bool = True,
                 enc_out: Optional[np.ndarray] = None) -> Optional[tt.Tensor]:
    """Speech-side prefix for one utterance; None for text-input modes.

    The encoder always runs off-tape: its outputs are constants during
    adaptation, which is the freeze contract in mechanical form.  Pass
    `enc_out` to reuse a cached readout instead of re-running the encoder.
    """
    if sys.mode == "aec":
        return None
    if enc_out is None:
        enc_out = encoder_readout(sys.mode, enc, frames)
    if sys.mode == "sp":
        proj = tape.watch(sys.sp_proj) if tape is not None else tt.Tensor(sys.sp_proj.value)
        return sp_project(tt.Tensor(enc_out), proj)
    z = LogitGram(tt.Tensor(enc_out))
    table = sys.decoder.embedding(tape)
    proj = None
    if sys.topp_proj is not None:
        proj = tape.watch(sys.topp_proj) if tape is not None else tt.Tensor(sys.topp_proj.value)
    adapter = None
    if sys.adapter is not None:
        adapter = tape.watch(sys.adapter) if tape is not None else tt.Tensor(sys.adapter.value)
    return reconstruct(z, sys.conn, table, proj=proj, adapter=adapter,
                       at_inference=at_inference)


def prompt_ids(sys: DecoderSystem, vocab: Vocabulary,
               nbest: Optional[NBestList] = None) -> list[int]:
    ids = [vocab.bos_id]
    if sys.prompt_id is not None:
        ids.append(sys.prompt_id)
    if sys.mode == "aec":
        if nbest is None:
            raise ValueError("aec mode needs an n-best list")
        ids.extend(aec_build_input(nbest, sys.aec_n, vocab))
        ids.append(vocab.eos_id)
    return ids


def teacher_forcing_example(sys: DecoderSystem, vocab: Vocabulary, target: TokenSeq,
                            nbest: Optional[NBestList] = None
                            ) -> tuple[list[int], np.ndarray, np.ndarray]:
    """(text_ids, next-token targets, loss mask); loss covers target ++ <eos>."""
    prompt = prompt_ids(sys, vocab, nbest)
    text = prompt + list(target)
    targets = np.asarray(text[1:] + [vocab.eos_id], dtype=np.intp)
    mask = np.zeros(len(text), dtype=np.float64)
    mask[len(prompt) - 1:] = 1.0
    return text, targets, mask


# ---------------------------------------------------------------------------
# generation


def generate(sys: DecoderSystem, speech: Optional[tt.Tensor], prompt: list[int],
             max_new: int = 48, strategy: str = "greedy", beam: int = 1) -> TokenSeq:
    """Autoregressive decode until <eos> or `max_new` generated tokens."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    dec = sys.decoder
    eos = dec.vocab.eos_id
    s = 0 if speech is None else speech.shape[0]
    budget = min(max_new, dec.cfg.max_len - s - len(prompt))
    if strategy == "greedy" or (strategy == "beam" and beam == 1):
        ids = list(prompt)
        for _ in range(budget):
            logits = dec.forward(speech, ids).data[-1]
            nxt = int(np.argmax(logits))
            if nxt == eos:
                break
            ids.append(nxt)
        return tuple(ids[len(prompt):])
    if strategy != "beam":
        raise ValueError("strategy must be 'greedy' or 'beam'")

    live: list[tuple[list[int], float]] = [(list(prompt), 0.0)]
    done: list[tuple[list[int], float]] = []
    for _ in range(budget):
        if not live:
            break
        cand: list[tuple[float, int, list[int]]] = []
        for ids, score in live:
            logits = dec.forward(speech, ids).data[-1]
            logp = tt.log_softmax(tt.Tensor(logits)).data
            order = np.argsort(-logp, kind="stable")[:beam]
            for tok in order:
                cand.append((score + float(logp[tok]), int(tok), ids))
        cand.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, tok, ids in cand[: beam]:
            if tok == eos:
                done.append((ids, score))
            else:
                live.append((ids + [tok], score))
    done.extend(live)
    best = max(done, key=lambda d: d[1])
    return tuple(best[0][len(prompt):])


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Plain Adam with linear warmup into cosine decay."""

    def __init__(self, params: Sequence[tt.Parameter], lr: float, total_steps: int,
                 warmup: int = 0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.base_lr = lr
        self.total = max(total_steps, 1)
        self.warmup = warmup
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def lr_at(self, t: int) -> float:
        if self.base_lr == 0.0:
            return 0.0
        if self.warmup > 0 and t <= self.warmup:
            return self.base_lr * t / self.warmup
        span = max(self.total - self.warmup, 1)
        frac = min(max(t - self.warmup, 0) / span, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        lr = self.lr_at(self.t)
        if lr == 0.0:
            return
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    skipped: int = 0
    final_step: int = 0
    initial_dev_loss: float = float("nan")
    final_dev_loss: float = float("nan")

    def to_csv(self) -> str:
        lines = ["step,lr,train_loss,dev_loss"]
        for r in self.rows:
            dev = "" if r.get("dev_loss") is None else f"{r['dev_loss']:.6f}"
            lines.append(f"{r['step']},{r['lr']:.8f},{r['train_loss']:.6f},{dev}")
        return "\n".join(lines) + "\n"


def mean_ctc_loss(enc: SpeechEncoder, dataset: Sequence[Utterance],
                  blank_id: int) -> float:
    total, count = 0.0, 0
    for utt in dataset:
        res = ctc_loss(enc.logitgram(utt.frames), utt.source, blank_id)
        if res.feasible:
            total += res.loss.item()
            count += 1
    return total / max(count, 1)


def train_encoder_ctc(enc: SpeechEncoder, train_set: Sequence[Utterance],
                      dev_set: Sequence[Utterance], cfg: TrainConfig,
                      blank_id: int, start_step: int = 0) -> TrainLog:
    """CTC training; deterministic per cfg.seed.  Raises on divergence."""
    if not train_set:
        raise ValueError("training set is empty")
    names = sorted(enc.params)
    opt = Adam([enc.params[n] for n in names], cfg.lr, cfg.steps, cfg.warmup)
    opt.t = start_step
    root = CounterRng(cfg.seed, stream=0x7E40)
    log = TrainLog(final_step=start_step)
    dev_probe = list(dev_set[: cfg.dev_subset])
    log.initial_dev_loss = mean_ctc_loss(enc, dev_set, blank_id)

    for step in range(start_step, cfg.steps):
        idx = root.child(f"batch{step}").integers(0, len(train_set), cfg.batch_size)
        opt.zero_grad()
        n_ok, loss_sum = 0, 0.0
        try:
            for j, i in enumerate(idx):
                utt = train_set[int(i)]
                frames = augment(utt.frames, cfg.augment, root.child(f"aug{step}.{j}"))
                tape = tt.GradTape()
                _, logits = enc.forward(frames, tape=tape, drop_rate=cfg.dropout,
                                        drop_rng=root.child(f"drop{step}.{j}"))
                res = ctc_loss(LogitGram(logits), utt.source, blank_id)
                if not res.feasible:
                    log.skipped += 1
                    continue
                tape.backward(res.loss)
                n_ok += 1
                loss_sum += res.loss.item()
        except tt.NonFiniteError as e:
            raise TrainingDiverged(step, str(e)) from e
        if n_ok:
            inv = 1.0 / n_ok
            for n in names:
                enc.params[n].grad *= inv
            opt.step()
        log.final_step = step + 1
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "lr": opt.lr_at(opt.t), "train_loss": loss_sum / max(n_ok, 1),
                   "dev_loss": None}
            if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps - 1):
                row["dev_loss"] = mean_ctc_loss(enc, dev_probe, blank_id)
            log.rows.append(row)
    log.final_dev_loss = mean_ctc_loss(enc, dev_set, blank_id)
    return log


def _adapt_loss(sys: DecoderSystem, enc: SpeechEncoder, vocab: Vocabulary,
                utt: Utterance, frames: np.ndarray, tape, drop_rng,
                drop_rate: float, nbest: Optional[NBestList],
                enc_out: Optional[np.ndarray] = None) -> tt.Tensor:
    speech = conditioning(sys, enc, frames, tape=tape, at_inference=False,
                          enc_out=enc_out)
    text, targets, mask = teacher_forcing_example(sys, vocab, utt.target, nbest)
    logits = sys.decoder.forward(speech, text, tape=tape, drop_rate=drop_rate,
                                 drop_rng=drop_rng)
    return tt.cross_entropy(logits, targets, mask)


def adapt_decoder(sys: DecoderSystem, enc: SpeechEncoder, vocab: Vocabulary,
                  train_set: Sequence[Utterance], dev_set: Sequence[Utterance],
                  cfg: TrainConfig,
                  aec_cache: Optional[dict[str, NBestList]] = None) -> TrainLog:
    """Fine-tune the decoder side; the encoder is frozen (never taped)."""
    if not train_set:
        raise ValueError("training set is empty")
    if sys.mode == "aec" and aec_cache is None:
        raise ValueError("aec adaptation needs an n-best cache for the dataset")
    if sys.mode == "topP" and sys.topp_proj is None:
        raise ValueError("topP adaptation needs its projection (build_system creates it)")
    if sys.mode == "adapter" and sys.adapter is None:
        raise ValueError("adapter adaptation needs its table (build_system creates it)")
    if sys.mode == "sp" and sys.sp_proj is None:
        raise ValueError("sp adaptation needs its projection (build_system creates it)")
    if sys.mode == "adapter" and sys.adapter.value.shape[0] != enc.cfg.out_slots:
        raise ValueError("adapter table rows must match encoder output slots")
    if sys.mode not in ("sp", "aec", "adapter") and enc.cfg.out_slots != vocab.size + 1:
        raise ValueError("encoder output slots do not match the LM vocabulary")

    trainable = dict(sys.decoder.params)
    trainable.update(sys.extra_params())
    names = sorted(trainable)
    opt = Adam([trainable[n] for n in names], cfg.lr, cfg.steps, cfg.warmup)
    root = CounterRng(cfg.seed, stream=0xADA7)
    log = TrainLog()

    def cache_for(utt):
        return aec_cache.get(utt.id) if aec_cache is not None else None

    # without augmentation the frozen encoder's outputs never change
    enc_cache = EncoderOutputCache(enc, sys.mode) if cfg.augment is None else None

    def dev_loss(subset):
        total, count = 0.0, 0
        for utt in subset:
            out = enc_cache.get(utt) if enc_cache is not None else None
            loss = _adapt_loss(sys, enc, vocab, utt, utt.frames, None, None, 0.0,
                               cache_for(utt), enc_out=out)
            total += loss.item()
            count += 1
        return total / max(count, 1)

    dev_probe = list(dev_set[: cfg.dev_subset])
    log.initial_dev_loss = dev_loss(dev_set)

    for step in range(cfg.steps):
        idx = root.child(f"batch{step}").integers(0, len(train_set), cfg.batch_size)
        opt.zero_grad()
        loss_sum = 0.0
        try:
            for j, i in enumerate(idx):
                utt = train_set[int(i)]
                if enc_cache is not None:
                    frames, out = utt.frames, enc_cache.get(utt)
                else:
                    frames = augment(utt.frames, cfg.augment, root.child(f"aug{step}.{j}"))
                    out = None
                tape = tt.GradTape()
                loss = _adapt_loss(sys, enc, vocab, utt, frames, tape,
                                   root.child(f"drop{step}.{j}"), cfg.dropout,
                                   cache_for(utt), enc_out=out)
                tape.backward(loss)
                loss_sum += loss.item()
        except tt.NonFiniteError as e:
            raise TrainingDiverged(step, str(e)) from e
        inv = 1.0 / cfg.batch_size
        for n in names:
            trainable[n].grad *= inv
        opt.step()
        log.final_step = step + 1
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "lr": opt.lr_at(opt.t),
                   "train_loss": loss_sum / cfg.batch_size, "dev_loss": None}
            if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps - 1):
                row["dev_loss"] = dev_loss(dev_probe)
            log.rows.append(row)
    log.final_dev_loss = dev_loss(dev_set)
    return log


# ---------------------------------------------------------------------------
# evaluation


def decode_utterance(sys: DecoderSystem, enc: SpeechEncoder, vocab: Vocabulary,
                     utt: Utterance, max_new: int = 48, strategy: str = "greedy",
                     beam: int = 1, nbest: Optional[NBestList] = None) -> TokenSeq:
    speech = conditioning(sys, enc, utt.frames, tape=None, at_inference=True)
    prompt = prompt_ids(sys, vocab, nbest)
    return generate(sys, speech, prompt, max_new=max_new, strategy=strategy, beam=beam)


def evaluate_system(sys: DecoderSystem, enc: SpeechEncoder, vocab: Vocabulary,
                    dataset: Sequence[Utterance], max_new: int = 48,
                    aec_cache: Optional[dict[str, NBestList]] = None) -> WerReport:
    refs, hyps = [], []
    for utt in dataset:
        nb = aec_cache.get(utt.id) if aec_cache is not None else None
        hyps.append(decode_utterance(sys, enc, vocab, utt, max_new=max_new, nbest=nb))
        refs.append(utt.target)
    return corpus_wer(refs, hyps)


def teacher_forcing_stats(sys: DecoderSystem, enc: SpeechEncoder, vocab: Vocabulary,
                          dataset: Sequence[Utterance],
                          aec_cache: Optional[dict[str, NBestList]] = None) -> dict:
    """Pooled per-token log perplexity and argmax accuracy, teacher-forced."""
    if not dataset:
        raise ValueError("dataset is empty")
    nll_sum, correct, count = 0.0, 0, 0
    for utt in dataset:
        nb = aec_cache.get(utt.id) if aec_cache is not None else None
        speech = conditioning(sys, enc, utt.frames, tape=None, at_inference=True)
        text, targets, mask = teacher_forcing_example(sys, vocab, utt.target, nb)
        logits = sys.decoder.forward(speech, text)
        logp = tt.log_softmax(logits).data
        for pos in np.nonzero(mask)[0]:
            nll_sum -= float(logp[pos, targets[pos]])
            correct += int(np.argmax(logits.data[pos]) == targets[pos])
            count += 1
    return {"log_ppl": nll_sum / count, "token_acc": correct / count}
