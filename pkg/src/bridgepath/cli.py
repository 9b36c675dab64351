"""Command line entry point.

Subcommands wire the pipeline end to end: ``synth`` (corpus generator),
``train``, ``generate``, ``eval``, ``sample-paths`` (CSV for path
visualizations), and ``gradcheck`` (finite-difference verification).
Thread count comes from ``--threads`` or the BRIDGEPATH_THREADS
environment variable; 1 guarantees bitwise determinism.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import torch

from . import distill, infer, metrics
from .bridge import BridgeParams, paths_to_csv, sample_path
from .config import ConfigError, RunConfig, load_config
from .corpus import (
    Dialogue,
    Utterance,
    load_corpus,
    prefix_key,
    save_continuations,
    save_corpus,
    synth_corpus,
    SynthSpec,
    window_dialogue,
)
from .distill import collate, compute_mus, corpus_nll
from .gradcheck import format_report, gradient_check, parameter_groups

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("BRIDGEPATH_THREADS")
    return int(env) if env else 1


def _load_run_config(path: str) -> RunConfig:
    return load_config(path, RunConfig)


def _require_file(path: str, field_name: str):
    if not path:
        raise ConfigError(f"field '{field_name}' is required")
    if not os.path.exists(path):
        raise ConfigError(f"field '{field_name}': no such file: {path}")


def cmd_synth(args) -> int:
    spec = SynthSpec(
        templates=args.templates,
        branching=args.branching,
        turns=args.turns,
        vocab_size=args.vocab_size,
        seed=args.seed,
    )
    result = synth_corpus(spec)
    save_corpus(result.dialogues, args.out)
    if args.meta:
        save_continuations(result.continuations, args.meta)
    print(f"wrote {len(result.dialogues)} dialogues to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = _load_run_config(args.config)
        _require_file(cfg.train_corpus, "train_corpus")
        if cfg.val_corpus:
            _require_file(cfg.val_corpus, "val_corpus")
        if not cfg.checkpoint_dir:
            raise ConfigError("field 'checkpoint_dir' is required")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(_threads(args))

    corpus, vocab, report = load_corpus(
        cfg.train_corpus, min_freq=cfg.min_token_freq
    )
    if report.parse_errors:
        for err in report.parse_errors:
            print(f"warning: {err}", file=sys.stderr)
    val = None
    if cfg.val_corpus:
        val, _v, _r = load_corpus(cfg.val_corpus, vocab=vocab)

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    state, _log = distill.train(
        corpus,
        cfg.train_config(),
        vocab,
        val_corpus=val,
        checkpoint_dir=cfg.checkpoint_dir,
        metrics_path=os.path.join(cfg.checkpoint_dir, "metrics.csv"),
    )
    distill.save_checkpoint(state, cfg.checkpoint_dir)
    eval_set = val if val else corpus
    windowed = [w for d in eval_set for w in window_dialogue(d, cfg.window)]
    ppl = math.exp(corpus_nll(windowed, state.model, state.mapper))
    which = "validation" if val else "train"
    print(f"final {which} perplexity: {ppl:.4f}")
    return EXIT_OK


def _load_checkpoint_state(path: str):
    state = distill.load_checkpoint(path)
    state.model.eval()
    state.mapper.eval()
    return state


def _read_turn_file(path: str) -> list[list[str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line)["turns"])
    return out


def cmd_generate(args) -> int:
    state = _load_checkpoint_state(args.checkpoint)
    vocab = state.vocab
    delta = state.config.delta
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for turns in _read_turn_file(args.contexts):
            context = [Utterance.from_text(t, vocab) for t in turns]
            if args.n > 1:
                pairs = infer.diverse_generate(
                    context,
                    args.n,
                    state.model,
                    state.mapper,
                    base_seed=args.seed,
                    delta=delta,
                    decoding=args.decoding if args.decoding != "greedy" else "beam",
                    beam_width=args.beam_width,
                    top_k=args.top_k,
                    max_new_tokens=args.max_new_tokens,
                    mode=args.mode,
                )
                record = {
                    "context": turns,
                    "mode": args.mode,
                    "seed": args.seed,
                    "responses": [
                        {"response": vocab.decode(tokens), "count": count}
                        for tokens, count in pairs
                    ],
                }
            else:
                req = infer.GenerationRequest(
                    context=context,
                    mode=args.mode,
                    decoding=args.decoding,
                    beam_width=args.beam_width,
                    top_k=args.top_k,
                    max_new_tokens=args.max_new_tokens,
                    seed=args.seed,
                )
                result = infer.generate(
                    req, state.model, state.mapper, delta=delta
                )
                record = {
                    "context": turns,
                    "response": result.text(vocab),
                    "mode": result.mode,
                    "seed": result.seed,
                    "logprob": result.logprob,
                }
            out.write(json.dumps(record) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_checkpoint_state(args.checkpoint)
    vocab = state.vocab
    dialogues, _v, _r = load_corpus(args.corpus, vocab=vocab)
    refs_map = None
    if args.refs:
        with open(args.refs, encoding="utf-8") as fh:
            refs_map = json.load(fh)

    hyps = []
    refs = []
    for d in dialogues:
        req = infer.GenerationRequest(
            context=list(d.context),
            mode=args.mode,
            decoding=args.decoding,
            beam_width=args.beam_width,
            top_k=args.top_k,
            max_new_tokens=args.max_new_tokens,
            seed=args.seed,
        )
        result = infer.generate(
            req, state.model, state.mapper, delta=state.config.delta
        )
        hyps.append(result.text(vocab).split())
        key = prefix_key([u.text for u in d.context])
        if refs_map is not None and key in refs_map:
            refs.append([r.lower().split() for r in refs_map[key]])
        else:
            refs.append([d.response.text.split()])

    report = metrics.EvalReport(
        bleu={n: metrics.bleu_n(hyps, refs, n) for n in (1, 2, 3, 4)},
        distinct={n: metrics.distinct_n(hyps, n) for n in (1, 2)},
        entropy4=metrics.entropy_n(hyps, 4),
        ppl=metrics.perplexity(state.model, state.mapper, dialogues),
        n_hypotheses=len(hyps),
        n_references=sum(len(r) for r in refs),
    )
    print(report.to_json())
    if args.csv:
        header = (
            "bleu1,bleu2,bleu3,bleu4,distinct1,distinct2,entropy4,ppl\n"
        )
        exists = os.path.exists(args.csv)
        with open(args.csv, "a", encoding="utf-8") as fh:
            if not exists:
                fh.write(header)
            fh.write(
                ",".join(
                    f"{v:.6g}"
                    for v in (
                        *[report.bleu[n] for n in (1, 2, 3, 4)],
                        report.distinct[1],
                        report.distinct[2],
                        report.entropy4,
                        report.ppl,
                    )
                )
                + "\n"
            )
    return EXIT_OK


def cmd_sample_paths(args) -> int:
    state = _load_checkpoint_state(args.checkpoint)
    records = _read_turn_file(args.dialogue)
    if not records:
        print("error: empty dialogue file", file=sys.stderr)
        return EXIT_ERROR
    turns = records[0]
    if len(turns) < 2:
        print("error: dialogue needs at least 2 utterances", file=sys.stderr)
        return EXIT_ERROR
    d = Dialogue.from_turns(turns, state.vocab)
    batch = collate([d], state.model.max_len)
    with torch.no_grad():
        mus = compute_mus(batch, state.model, state.mapper)[0]
    T = d.horizon
    delta = distill.effective_delta(state.config.delta, T)
    params = BridgeParams(mus=mus, T=T, delta=delta)
    paths = []
    for k in range(args.paths):
        # per-path seed stream keeps the first K paths a prefix of any
        # larger K with the same base seed
        g = torch.Generator()
        g.manual_seed(args.seed + k)
        paths.append(sample_path(params, g, path_index=k))
    csv_text = paths_to_csv(paths, normalize=args.normalize)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        cfg = _load_run_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(_threads(args))

    synth = synth_corpus(
        SynthSpec(templates=2, branching=1, turns=3, vocab_size=12, seed=7)
    )
    tc = cfg.train_config()
    # finite differences need a deterministic loss; dropout off
    tc = type(tc)(**{**distill.config_to_dict(tc), "dropout": 0.0, "K": tc.K})
    state = distill.init_state(tc, synth.vocab)
    batch = collate(synth.dialogues[:2], tc.max_len)

    def loss_fn():
        g = torch.Generator()
        g.manual_seed(123)
        loss, _parts = distill.total_loss_batch(
            batch, state.model, state.mapper, tc, g
        )
        return loss

    groups = parameter_groups(state.model, state.mapper)
    errors = gradient_check(
        loss_fn,
        groups,
        h=args.h,
        corrupt_group=args.corrupt,
        max_coords_per_param=args.max_coords,
    )
    print(format_report(errors, tol=args.tol))
    return EXIT_OK if all(e < args.tol for e in errors.values()) else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridgepath",
        description="Latent-path dialogue augmentation pipeline",
    )
    parser.add_argument("--threads", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic branching corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--meta", default=None)
    p.add_argument("--templates", type=int, default=8)
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--turns", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    def add_decoding(p):
        p.add_argument("--mode", choices=("expectation", "sampled"), default="expectation")
        p.add_argument("--decoding", choices=("greedy", "beam", "topk"), default="greedy")
        p.add_argument("--beam-width", type=int, default=5)
        p.add_argument("--top-k", type=int, default=5)
        p.add_argument("--max-new-tokens", type=int, default=32)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="generate responses for contexts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--contexts", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", default=None)
    add_decoding(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--refs", default=None)
    p.add_argument("--csv", default=None)
    add_decoding(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-paths", help="emit sampled latent paths as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dialogue", required=True)
    p.add_argument("--paths", type=int, default=8)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample_paths)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", required=True)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", default=None, help="fault-injection group")
    p.add_argument("--max-coords", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
