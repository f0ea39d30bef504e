"""Command-line harness tying the pieces into runnable experiments.

Subcommands mirror the experiment stages: `gen-data` materialises a task,
`train-encoder` CTC-trains the acoustic side, `adapt` fine-tunes the
decoder under a connection mode, `decode-eval` reports WER (encoder-only
beam search, or the connected system), `sweep-tau` traces the temperature
spectrum, and `swap` evaluates a decoder against a different encoder with
no weight updates.

Config files are JSON (schema in the README); command-line flags override
file values, and every emitted JSON/CSV embeds the effective config so a
result can be traced to its inputs.  Exit codes: 0 success, 1 runtime or
numerical failure, 2 usage/config errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as tt
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .connector import ConnectorConfig
from .ctc import NBestList, beam_search, greedy_decode, nbest_from_json, nbest_to_json
from .lexicon import Posteriorgram, Vocabulary
from .metrics import corpus_wer, werr
from .models import (
    ADAPT_MODES,
    DecoderConfig,
    DecoderLM,
    DecoderSystem,
    EncoderConfig,
    SpeechEncoder,
    TrainConfig,
    TrainingDiverged,
    adapt_decoder,
    build_system,
    evaluate_system,
    train_encoder_ctc,
)
from .synthdata import (
    MaskConfig,
    TaskSpec,
    Utterance,
    build_chain,
    build_translation,
    build_vocabulary,
    make_splits,
    prompt_token_id,
    utterance_from_json,
    utterance_to_json,
)

DEFAULT_TAU_GRID = (1e-4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1e4)


class ConfigError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"no such file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e


# ---------------------------------------------------------------------------
# task loading


@dataclass
class TaskBundle:
    spec: TaskSpec
    sizes: dict
    seed: int
    translation: Optional[dict[int, int]]
    raw: dict  # resolved config, echoed into outputs

    def splits(self):
        return make_splits(self.spec, self.sizes["train"], self.sizes["dev"],
                           self.sizes["test"], self.seed, self.translation)


def load_task(source) -> TaskBundle:
    raw = dict(source) if isinstance(source, dict) else _load_json(source)
    try:
        vocab = build_vocabulary(raw["vocab_size"])
        if "chain" in raw:
            ch = raw["chain"]
            trans, init, pairs = build_chain(
                vocab, ch["seed"], ch.get("successors", 4),
                tuple(ch.get("weights", (0.45, 0.3, 0.15, 0.1))),
                ch.get("smoothing", 0.01),
            )
        else:
            trans = np.asarray(raw["transition"], dtype=np.float64)
            init = np.asarray(raw["init"], dtype=np.float64)
            pairs = {int(k): int(v) for k, v in raw.get("confusion_pairs", {}).items()}
        spec = TaskSpec(
            vocab=vocab,
            feat_dim=raw["feat_dim"],
            transition=trans,
            init_probs=init,
            length_range=tuple(raw["length_range"]),
            duration_range=tuple(raw["duration_range"]),
            noise_sigma=raw["noise_sigma"],
            confusion=pairs,
            confusion_prob=raw["confusion_prob"],
            prototype_seed=raw.get("prototype_seed", 7),
            name=raw.get("name", "task"),
        )
        translation = None
        if raw.get("task", "asr") == "ast":
            translation = build_translation(vocab, raw.get("translation_seed", 5))
        sizes = dict(raw["splits"])
        seed = sizes.pop("seed", 0)
    except KeyError as e:
        raise ConfigError(f"task spec is missing field {e}") from e
    return TaskBundle(spec, sizes, seed, translation, raw)


def _read_jsonl_split(data_dir: Path, split: str) -> list[Utterance]:
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"no such split file: {path}")
    return [utterance_from_json(line) for line in path.read_text().splitlines() if line]


def resolve_dataset(args, split: str) -> tuple[TaskBundle, list[Utterance]]:
    """Materialised directory if --data was given, else on-the-fly from --spec."""
    if getattr(args, "data", None):
        data_dir = Path(args.data)
        bundle = load_task(_load_json(data_dir / "manifest.json")["task"])
        return bundle, _read_jsonl_split(data_dir, split)
    if not getattr(args, "spec", None):
        raise ConfigError("need --spec TASK.json or --data DIR")
    bundle = load_task(args.spec)
    train, dev, test = bundle.splits()
    return bundle, {"train": train, "dev": dev, "test": test}[split]


# ---------------------------------------------------------------------------
# config files


def _mask_config(d: Optional[dict]) -> Optional[MaskConfig]:
    if d is None:
        return None
    return MaskConfig(**d)


def load_train_config(path: Optional[str], overrides: dict) -> tuple[TrainConfig, dict]:
    raw = _load_json(path) if path else {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    aug = raw.get("augment", dataclasses.asdict(MaskConfig()))
    cfg = TrainConfig(
        steps=raw.get("steps", 1500),
        batch_size=raw.get("batch_size", 8),
        lr=raw.get("lr", 3e-3),
        warmup=raw.get("warmup", 50),
        dropout=raw.get("dropout", 0.0),
        augment=_mask_config(aug),
        seed=raw.get("seed", 0),
        eval_every=raw.get("eval_every", 250),
        log_every=raw.get("log_every", 50),
        dev_subset=raw.get("dev_subset", 100),
    )
    return cfg, raw


def connector_from_raw(raw: dict, overrides: dict) -> ConnectorConfig:
    conn = dict(raw.get("connector", {}))
    for key in ("tau", "blk_downscale", "k", "apply_tau_at"):
        if overrides.get(key) is not None:
            conn[key] = overrides[key]
    conn.setdefault("mode", "full")
    return ConnectorConfig(**conn)


# ---------------------------------------------------------------------------
# checkpoint glue


def save_encoder_ckpt(path, enc: SpeechEncoder, vocab: Vocabulary, meta_extra: dict):
    tensors = {f"enc/{n}": p.value for n, p in enc.params.items()}
    meta = {"kind": "encoder", "vocab": json.loads(vocab.to_json()),
            "encoder_config": dataclasses.asdict(enc.cfg), "seed": enc.seed}
    meta.update(meta_extra)
    save_checkpoint(path, tensors, meta)


def load_encoder_ckpt(path) -> tuple[SpeechEncoder, Vocabulary, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") not in ("encoder", "system"):
        raise CheckpointError(f"{path}: not an encoder-bearing checkpoint")
    v = meta["vocab"]
    vocab = Vocabulary(tuple(v["tokens"]), v["sep"], v["bos"], v["eos"])
    enc = SpeechEncoder(EncoderConfig(**meta["encoder_config"]), meta.get("seed", 0))
    for n, p in enc.params.items():
        p.value[...] = tensors[f"enc/{n}"]
    return enc, vocab, meta


def save_system_ckpt(path, sys_: DecoderSystem, enc: SpeechEncoder, vocab: Vocabulary,
                     meta_extra: dict):
    tensors = {f"enc/{n}": p.value for n, p in enc.params.items()}
    tensors.update({f"dec/{n}": p.value for n, p in sys_.decoder.params.items()})
    tensors.update({f"extra/{n}": p.value for n, p in sys_.extra_params().items()})
    meta = {
        "kind": "system",
        "vocab": json.loads(vocab.to_json()),
        "encoder_config": dataclasses.asdict(enc.cfg),
        "decoder_config": dataclasses.asdict(sys_.decoder.cfg),
        "mode": sys_.mode,
        "connector": dataclasses.asdict(sys_.conn),
        "aec_n": sys_.aec_n,
        "prompt_id": sys_.prompt_id,
        "seed": enc.seed,
        "decoder_seed": sys_.decoder.seed,
    }
    meta.update(meta_extra)
    save_checkpoint(path, tensors, meta)


def load_system_ckpt(path) -> tuple[DecoderSystem, Vocabulary, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "system":
        raise CheckpointError(f"{path}: not a decoder-system checkpoint")
    v = meta["vocab"]
    vocab = Vocabulary(tuple(v["tokens"]), v["sep"], v["bos"], v["eos"])
    dec = DecoderLM(DecoderConfig(**meta["decoder_config"]), vocab,
                    meta.get("decoder_seed", 0))
    for n, p in dec.params.items():
        p.value[...] = tensors[f"dec/{n}"]
    conn = ConnectorConfig(**meta["connector"])
    sys_ = DecoderSystem(decoder=dec, mode=meta["mode"], conn=conn,
                         aec_n=meta.get("aec_n", 1), prompt_id=meta.get("prompt_id"))
    for tname, attr in (("extra/sp.proj", "sp_proj"), ("extra/topp.proj", "topp_proj"),
                        ("extra/adapter.table", "adapter")):
        if tname in tensors:
            setattr(sys_, attr, tt.Parameter(tensors[tname], name=tname))
    return sys_, vocab, meta


def _check_vocab_compatible(sys_: DecoderSystem, enc: SpeechEncoder,
                            enc_vocab: Vocabulary, dec_vocab: Vocabulary):
    if sys_.mode == "adapter":
        if sys_.adapter is None or sys_.adapter.value.shape[0] != enc.cfg.out_slots:
            raise ConfigError(
                "adapter table does not cover this encoder's output slots"
            )
        return
    if enc_vocab.tokens != dec_vocab.tokens:
        raise ConfigError(
            "encoder and decoder vocabularies differ; retrain or use an adapter-mode system"
        )
    if sys_.mode not in ("sp", "aec") and enc.cfg.out_slots != dec_vocab.size + 1:
        raise ConfigError("encoder output width does not match the LM vocabulary")


# ---------------------------------------------------------------------------
# evaluation plumbing shared by decode-eval / sweep / swap


def _posteriorgram(enc: SpeechEncoder, utt: Utterance) -> Posteriorgram:
    logits = enc.logitgram(utt.frames).logits
    return Posteriorgram(tt.softmax(logits).data)


def eval_ctc_beam(enc: SpeechEncoder, dataset: Sequence[Utterance], beam: int,
                  nbest_n: int = 1, collect: bool = False):
    refs, hyps, lists = [], [], {}
    for utt in dataset:
        nb = beam_search(_posteriorgram(enc, utt), beam=beam, n=max(nbest_n, 1))
        refs.append(utt.source)
        hyps.append(nb.top())
        if collect:
            lists[utt.id] = nb
    return corpus_wer(refs, hyps), lists


def eval_ctc_greedy(enc: SpeechEncoder, dataset: Sequence[Utterance]):
    refs = [utt.source for utt in dataset]
    hyps = [greedy_decode(_posteriorgram(enc, utt)) for utt in dataset]
    return corpus_wer(refs, hyps)


def build_aec_cache(enc: SpeechEncoder, dataset: Sequence[Utterance], beam: int,
                    n: int) -> dict[str, NBestList]:
    return {
        utt.id: beam_search(_posteriorgram(enc, utt), beam=beam, n=n)
        for utt in dataset
    }


def eval_connected(sys_: DecoderSystem, enc: SpeechEncoder, vocab: Vocabulary,
                   dataset: Sequence[Utterance], beam: int, max_new: int):
    cache = None
    if sys_.mode == "aec":
        cache = build_aec_cache(enc, dataset, beam=max(beam, sys_.aec_n), n=sys_.aec_n)
    return evaluate_system(sys_, enc, vocab, dataset, max_new=max_new, aec_cache=cache)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    bundle = load_task(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, dev, test = bundle.splits()
    hashes, sizes = {}, {}
    for split, utts in (("train", train), ("dev", dev), ("test", test)):
        text = "\n".join(utterance_to_json(u) for u in utts) + "\n"
        (out / f"{split}.jsonl").write_text(text)
        hashes[split] = hashlib.sha256(text.encode()).hexdigest()
        sizes[split] = len(utts)
    manifest = {"task": bundle.raw, "sizes": sizes, "sha256": hashes}
    (out / "manifest.json").write_text(_dump(manifest) + "\n")
    print(_dump(manifest))
    return 0


def cmd_train_encoder(args) -> int:
    bundle = load_task(args.spec)
    vocab = bundle.spec.vocab
    overrides = {"steps": args.steps, "seed": args.seed}
    cfg, raw_cfg = load_train_config(args.config, overrides)
    enc_raw = raw_cfg.get("encoder", {})
    start_step = 0
    if args.resume:
        enc, vocab_r, meta = load_encoder_ckpt(args.resume)
        if vocab_r.tokens != vocab.tokens:
            raise ConfigError("resume checkpoint was trained on a different vocabulary")
        start_step = meta.get("step", 0)
    else:
        enc_cfg = EncoderConfig(feat_dim=bundle.spec.feat_dim,
                                out_slots=vocab.size + 1, **enc_raw)
        enc = SpeechEncoder(enc_cfg, cfg.seed)
    train, dev, _ = bundle.splits()
    try:
        log = train_encoder_ctc(enc, train, dev, cfg, vocab.blank_id,
                                start_step=start_step)
    except TrainingDiverged as e:
        save_encoder_ckpt(args.out, enc, vocab,
                          {"step": e.step, "diverged": True, "task_name": bundle.spec.name})
        print(f"error: {e}", file=sys.stderr)
        return 1
    save_encoder_ckpt(args.out, enc, vocab,
                      {"step": log.final_step, "task_name": bundle.spec.name,
                       "train_config": raw_cfg})
    if args.curve:
        Path(args.curve).write_text(log.to_csv())
    dev_wer = eval_ctc_greedy(enc, dev)
    result = {
        "initial_dev_loss": log.initial_dev_loss,
        "final_dev_loss": log.final_dev_loss,
        "dev_greedy": dev_wer.as_dict(),
        "skipped": log.skipped,
        "step": log.final_step,
        "config": {"train": raw_cfg, "task": bundle.raw},
    }
    print(_dump(result))
    return 0


def cmd_adapt(args) -> int:
    if args.mode not in ADAPT_MODES:
        raise ConfigError(f"unknown mode {args.mode!r}; choose from {ADAPT_MODES}")
    enc, vocab, _ = load_encoder_ckpt(args.encoder)
    bundle = load_task(args.spec)
    if bundle.spec.vocab.tokens != vocab.tokens:
        raise ConfigError("task vocabulary differs from the encoder checkpoint")
    overrides = {"steps": args.steps, "seed": args.seed}
    cfg, raw_cfg = load_train_config(args.config, overrides)
    conn = connector_from_raw(raw_cfg, {"tau": args.tau, "blk_downscale": args.blk_downscale,
                                        "k": args.k})
    dec_raw = raw_cfg.get("decoder", {})
    dec = DecoderLM(DecoderConfig(vocab=vocab.size, **dec_raw), vocab, cfg.seed)
    prompt = prompt_token_id(vocab) if raw_cfg.get("use_prompt_token") else None
    sys_ = build_system(args.mode, enc, dec, conn, seed=cfg.seed,
                        aec_n=raw_cfg.get("aec_n", 1), prompt_id=prompt)

    train, dev, _ = bundle.splits()
    cache = None
    if args.mode == "aec":
        if not args.nbest_cache:
            raise ConfigError("aec adaptation needs --nbest-cache FILE (repeatable)")
        cache = {}
        for path in args.nbest_cache:
            for line in Path(path).read_text().splitlines():
                if line:
                    utt_id, nb = nbest_from_json(line)
                    cache[utt_id] = nb
        missing = [u.id for u in list(train) + list(dev) if u.id not in cache]
        if missing:
            raise ConfigError(f"n-best cache is missing {len(missing)} utterances "
                              f"(first: {missing[0]})")
    try:
        log = adapt_decoder(sys_, enc, vocab, train, dev, cfg, aec_cache=cache)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    save_system_ckpt(args.out, sys_, enc, vocab,
                     {"adapt_config": raw_cfg, "task_name": bundle.spec.name,
                      "step": log.final_step})
    if args.curve:
        Path(args.curve).write_text(log.to_csv())
    result = {
        "mode": args.mode,
        "initial_dev_loss": log.initial_dev_loss,
        "final_dev_loss": log.final_dev_loss,
        "step": log.final_step,
        "config": {"adapt": raw_cfg, "connector": dataclasses.asdict(sys_.conn),
                   "task": bundle.raw},
    }
    print(_dump(result))
    return 0


def _limit(dataset, n: Optional[int]):
    return dataset if not n else dataset[:n]


def cmd_decode_eval(args) -> int:
    enc, enc_vocab, _ = load_encoder_ckpt(args.encoder)
    bundle, dataset = resolve_dataset(args, args.split)
    dataset = _limit(dataset, args.limit)
    if args.decoder:
        sys_, dec_vocab, _ = load_system_ckpt(args.decoder)
        _check_vocab_compatible(sys_, enc, enc_vocab, dec_vocab)
        if args.tau is not None or args.blk_downscale is not None or args.k is not None:
            sys_.conn = connector_from_raw(
                {"connector": dataclasses.asdict(sys_.conn)},
                {"tau": args.tau, "blk_downscale": args.blk_downscale, "k": args.k},
            )
        report = eval_connected(sys_, enc, dec_vocab, dataset, args.beam, args.max_new)
        config = {"decode": "connected", "mode": sys_.mode,
                  "connector": dataclasses.asdict(sys_.conn),
                  "beam": args.beam, "max_new": args.max_new,
                  "split": args.split, "n_utts": len(dataset)}
    else:
        report, lists = eval_ctc_beam(enc, dataset, beam=args.beam,
                                      nbest_n=args.nbest or 1,
                                      collect=bool(args.nbest_out))
        if args.nbest_out:
            lines = [nbest_to_json(u.id, lists[u.id]) for u in dataset]
            Path(args.nbest_out).write_text("\n".join(lines) + "\n")
        config = {"decode": "ctc_beam", "beam": args.beam, "nbest": args.nbest or 1,
                  "split": args.split, "n_utts": len(dataset)}
    result = dict(report.as_dict())
    result["config"] = config
    out = _dump(result)
    if args.out:
        Path(args.out).write_text(out + "\n")
    print(out)
    return 0


def cmd_sweep_tau(args) -> int:
    enc, enc_vocab, _ = load_encoder_ckpt(args.encoder)
    sys_, dec_vocab, _ = load_system_ckpt(args.decoder)
    _check_vocab_compatible(sys_, enc, enc_vocab, dec_vocab)
    bundle, dataset = resolve_dataset(args, args.split)
    dataset = _limit(dataset, args.limit)
    grid = tuple(float(t) for t in args.grid.split(",")) if args.grid else DEFAULT_TAU_GRID
    rows = []
    for tau in grid:
        sys_.conn = dataclasses.replace(sys_.conn, tau=tau)
        report = eval_connected(sys_, enc, dec_vocab, dataset, args.beam, args.max_new)
        rows.append((tau, report))
    lines = ["tau,wer,sub,del,ins,n_ref"]
    for tau, r in rows:
        lines.append(f"{tau:g},{r.wer:.6f},{r.substitutions},{r.deletions},"
                     f"{r.insertions},{r.n_ref}")
    csv = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv)
    print(csv, end="")
    return 0


def cmd_swap(args) -> int:
    enc_b, encb_vocab, _ = load_encoder_ckpt(args.encoder)
    sys_, dec_vocab, _ = load_system_ckpt(args.decoder)
    _check_vocab_compatible(sys_, enc_b, encb_vocab, dec_vocab)
    if args.tau is not None or args.blk_downscale is not None:
        sys_.conn = connector_from_raw(
            {"connector": dataclasses.asdict(sys_.conn)},
            {"tau": args.tau, "blk_downscale": args.blk_downscale, "k": None},
        )
    bundle, dataset = resolve_dataset(args, args.split)
    dataset = _limit(dataset, args.limit)
    system = eval_connected(sys_, enc_b, dec_vocab, dataset, args.beam, args.max_new)
    baseline = eval_ctc_greedy(enc_b, dataset)
    result = {
        "system": system.as_dict(),
        "encoder_greedy_baseline": baseline.as_dict(),
        "werr_vs_greedy": werr(baseline.wer, system.wer),
        "config": {"mode": sys_.mode, "connector": dataclasses.asdict(sys_.conn),
                   "beam": args.beam, "max_new": args.max_new,
                   "split": args.split, "n_utts": len(dataset)},
    }
    out = _dump(result)
    if args.out:
        Path(args.out).write_text(out + "\n")
    print(out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctcbridge",
                                description="CTC-posterior bridge experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="materialise a synthetic task to JSONL")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-encoder", help="CTC-train the speech encoder")
    t.add_argument("--spec", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--curve", help="loss-curve CSV path")
    t.add_argument("--resume", help="continue from an encoder checkpoint")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train_encoder)

    a = sub.add_parser("adapt", help="fine-tune the decoder under a connection mode")
    a.add_argument("--mode", required=True)
    a.add_argument("--encoder", required=True)
    a.add_argument("--spec", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--curve")
    a.add_argument("--nbest-cache", action="append",
                   help="n-best JSONL (aec mode); repeat for several files")
    a.add_argument("--steps", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--tau", type=float)
    a.add_argument("--blk-downscale", type=float, dest="blk_downscale")
    a.add_argument("--k", type=int)
    a.set_defaults(func=cmd_adapt)

    d = sub.add_parser("decode-eval", help="WER of the encoder alone or the connected system")
    d.add_argument("--encoder", required=True)
    d.add_argument("--decoder", help="system checkpoint; omit for encoder-only beam WER")
    d.add_argument("--spec")
    d.add_argument("--data")
    d.add_argument("--split", default="test", choices=("train", "dev", "test"))
    d.add_argument("--limit", type=int)
    d.add_argument("--beam", type=int, default=10)
    d.add_argument("--nbest", type=int)
    d.add_argument("--nbest-out", dest="nbest_out")
    d.add_argument("--tau", type=float)
    d.add_argument("--blk-downscale", type=float, dest="blk_downscale")
    d.add_argument("--k", type=int)
    d.add_argument("--max-new", type=int, default=48, dest="max_new")
    d.add_argument("--out")
    d.set_defaults(func=cmd_decode_eval)

    s = sub.add_parser("sweep-tau", help="WER across a temperature grid")
    s.add_argument("--encoder", required=True)
    s.add_argument("--decoder", required=True)
    s.add_argument("--spec")
    s.add_argument("--data")
    s.add_argument("--split", default="test", choices=("train", "dev", "test"))
    s.add_argument("--limit", type=int)
    s.add_argument("--grid", help="comma-separated taus (default: the standard grid)")
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--max-new", type=int, default=48, dest="max_new")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_tau)

    w = sub.add_parser("swap", help="evaluate a decoder with a different encoder, no training")
    w.add_argument("--encoder", required=True, help="the replacement encoder")
    w.add_argument("--decoder", required=True, help="system adapted with another encoder")
    w.add_argument("--spec")
    w.add_argument("--data")
    w.add_argument("--split", default="test", choices=("train", "dev", "test"))
    w.add_argument("--limit", type=int)
    w.add_argument("--beam", type=int, default=10)
    w.add_argument("--tau", type=float)
    w.add_argument("--blk-downscale", type=float, dest="blk_downscale")
    w.add_argument("--max-new", type=int, default=48, dest="max_new")
    w.add_argument("--out")
    w.set_defaults(func=cmd_swap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (tt.NonFiniteError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
