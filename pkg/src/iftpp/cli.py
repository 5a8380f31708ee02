"""Command-line interface: ``iftpp <verb> ...``.

Machine-readable results go to stdout as JSON (or CSV for grids); progress
and warnings go to stderr. Exit status is 0 on success, 1 on a runtime
failure and 2 on bad input.
"""
import argparse
import json
import logging
import sys

import numpy as np

from . import generators as gen
from .config import ConfigError, TrainConfig
from .data import DatasetFormatError, EventSequence, read_jsonl, write_jsonl
from .models import load_checkpoint, save_checkpoint

log = logging.getLogger("iftpp")


class InputError(Exception):
    """Bad user input; reported with exit status 2."""


def _emit(obj):
    sys.stdout.write(json.dumps(obj) + "\n")


def _load_data(path):
    try:
        seqs = read_jsonl(path)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    if not seqs:
        raise InputError(f"{path}: no sequences")
    return seqs


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except (ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _pick(seqs, seq_id):
    if seq_id is None:
        return seqs[0]
    for s in seqs:
        if s.sequence_id == seq_id:
            return s
    raise InputError(f"sequence id {seq_id!r} not found")


def _parse_params(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"--param expects key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            raise InputError(f"--param {key}: value must be JSON") from None
    return out


def _fraction(text):
    num, sep, den = text.partition("/")
    return float(num) / float(den) if sep else float(text)


# ---------------------------------------------------------------- verbs

def cmd_generate(args):
    try:
        if args.kind in gen.PRESETS:
            spec = gen.preset(args.kind, args.n_seqs, args.n_events, args.seed)
            spec.params.update(_parse_params(args.param))
        else:
            spec = gen.GeneratorSpec(args.kind, _parse_params(args.param), args.n_seqs,
                                     args.n_events, args.seed)
        spec.validate()
        seqs = gen.generate(spec)
    except (ValueError, KeyError) as exc:
        raise InputError(str(exc)) from None
    result = {"kind": args.kind, "n_sequences": len(seqs), "n_events": args.n_events,
              "true_nll": gen.true_nll(spec, seqs)}
    if args.mask_fraction is not None:
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 3]))
        masked = []
        for s in seqs:
            obs, gap, truth = gen.mask_interval(s, args.mask_fraction, rng)
            obs.extra["gap"] = list(gap)
            obs.extra["ground_truth"] = truth.arrival_times.tolist()
            masked.append(obs)
        seqs = masked
        result["mask_fraction"] = args.mask_fraction
    if args.out:
        write_jsonl(args.out, seqs)
        result["out"] = args.out
    else:
        for s in seqs:
            sys.stdout.write(json.dumps(s.to_json()) + "\n")
        return 0
    _emit(result)
    return 0


def _load_config(path):
    try:
        return TrainConfig.load(path)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except ConfigError as exc:
        raise InputError(f"{path}: field {exc}") from None


def _splits(config, seqs):
    from .trainer import split_dataset, split_within_sequences
    if config.sequence_embedding:
        return split_within_sequences(seqs, config.split)
    return split_dataset(seqs, config.split, config.seed)


def cmd_train(args):
    from .trainer import nll_time, train
    config = _load_config(args.config)
    seqs = _load_data(args.data)
    if config.model == "fullynn":
        log.warning("FullyNN density is deficient: it does not integrate to 1 over tau > 0 "
                    "(mass on negative times and on no further event)")
    try:
        trn, val, tst = _splits(config, seqs)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    log.info("training %s on %d/%d/%d sequences", config.model, len(trn), len(val), len(tst))
    res = train(config, trn, val, all_seqs=seqs,
                callback=lambda e, a, b: log.info("epoch %d train %.4f val %.4f", e, a, b))
    out = {"model": config.model, "best_epoch": res.best_epoch, "train_nll": res.train_nll,
           "val_nll": res.best_val}
    if tst:
        out["test_nll"] = nll_time(res.model, tst)
    split_ids = {name: [s.sequence_id for s in part] for name, part in
                 (("train", trn), ("val", val), ("test", tst))}
    if config.sequence_embedding:
        split_ids = {}
    save_checkpoint(args.out_checkpoint, res.model, {"splits": split_ids})
    if args.metrics:
        with open(args.metrics, "w") as fh:
            fh.write(res.metrics_csv())
    out["checkpoint"] = args.out_checkpoint
    _emit(out)
    return 0


def cmd_evaluate(args):
    from .trainer import nll_time, nll_total
    seqs = _load_data(args.data)
    if args.true_model:
        try:
            spec = gen.preset(args.true_model, len(seqs), 1)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        _emit({"true_model": args.true_model, "nll_time": gen.true_nll(spec, seqs)})
        return 0
    if not args.checkpoint:
        raise InputError("--checkpoint or --true-model is required")
    model, extra = _load_model(args.checkpoint)
    if args.split != "all":
        ids = set(extra.get("splits", {}).get(args.split, []))
        if not ids:
            raise InputError(f"checkpoint records no {args.split!r} split")
        seqs = [s for s in seqs if s.sequence_id in ids]
    if model.n_marks and any(s.marks is None for s in seqs):
        raise InputError("checkpoint models marks but the data has none")
    if model.n_meta and any(s.metadata is None for s in seqs):
        raise InputError("checkpoint uses metadata but the data has none")
    try:
        if model.mark_head is not None:
            out = nll_total(model, seqs)
        else:
            out = {"nll_time": nll_time(model, seqs)}
    except (IndexError, KeyError) as exc:
        raise InputError(f"data does not match the checkpoint: {exc}") from None
    out["n_sequences"] = len(seqs)
    _emit(out)
    return 0


def _embedding_override(model, args):
    if args.embedding is not None:
        vec = np.array([float(v) for v in args.embedding.split(",")])
    elif args.interpolate:
        a, b = args.interpolate
        ids, table = model.embeddings()
        try:
            ea, eb = table[ids.index(a)], table[ids.index(b)]
        except ValueError:
            raise InputError(f"unknown sequence id in {args.interpolate}") from None
        vec = (1.0 - args.weight) * ea + args.weight * eb
    else:
        return None
    if not model.sequence_ids:
        raise InputError("checkpoint has no sequence embeddings")
    if len(vec) != model.config.seq_dim:
        raise InputError(f"embedding must have {model.config.seq_dim} entries")
    return vec


def cmd_sample(args):
    model, _ = _load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    history = _pick(_load_data(args.history_file), args.seq_id) if args.history_file else \
        EventSequence(np.zeros(0), sequence_id=args.seq_id or "")
    override = _embedding_override(model, args)
    if model.sequence_ids and override is None and history.sequence_id not in model.seq_index:
        raise InputError("pick a known --seq-id or pass --embedding/--interpolate")
    try:
        if args.sequence:
            taus, marks = model.generate(args.n, rng, history=history, seq_embedding=override,
                                         seq_id=history.sequence_id, meta=args.meta)
            out = {"inter_times": taus.tolist()}
            if marks is not None:
                out["marks"] = marks.tolist()
            _emit(out)
        else:
            c = model.next_context(history, meta=args.meta, seq_embedding=override)
            draws = np.ravel(model.decoder.sample(c[None], rng, size=args.n))
            _emit(draws.tolist())
    except RuntimeError as exc:
        log.error("sampling failed: %s", exc)
        return 1
    return 0


def _grid(text):
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise InputError("--grid expects start:stop:num") from None
    if lo <= 0 or hi <= lo or n < 2:
        raise InputError("--grid needs 0 < start < stop and num >= 2")
    return np.linspace(lo, hi, n)


def cmd_intensity(args):
    model, _ = _load_model(args.checkpoint)
    history = _pick(_load_data(args.history_file), args.seq_id)
    grid = _grid(args.grid)
    c = model.next_context(history, meta=args.meta, seq_embedding=_embedding_override(model, args))
    cc = np.broadcast_to(c, (len(grid), len(c))).copy()
    dec = model.decoder
    pdf = np.exp(dec.log_prob(grid, cc).data)
    try:
        lam = dec.intensity(grid, cc)
    except FloatingPointError as exc:
        log.error("%s", exc)
        return 1
    lines = ["tau,intensity,pdf"] + [f"{t:.10g},{l:.10g},{p:.10g}" for t, l, p in zip(grid, lam, pdf)]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_impute(args):
    from .trainer import nll_time, observed_gap, train_with_imputation
    config = _load_config(args.config)
    seq = _pick(_load_data(args.data), args.seq_id)
    try:
        gap = observed_gap(seq)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    truth = seq.extra.get("ground_truth")
    truth = EventSequence(truth, sequence_id=seq.sequence_id) if truth is not None else None
    strategies = ("none", "mean", "reparam") if args.strategy == "all" else (args.strategy,)
    out = {"gap": list(gap)}
    for strategy in strategies:
        cfg = config.replace(imputation=strategy)
        model = train_with_imputation(cfg, seq, gap, steps=args.steps)
        res = {"observed_nll": nll_time(model, [seq])}
        if truth is not None:
            res["ground_truth_nll"] = nll_time(model, [truth])
        out[strategy] = res
        log.info("%s: %s", strategy, res)
    _emit(out)
    return 0


def cmd_embed(args):
    model, _ = _load_model(args.checkpoint)
    try:
        ids, table = model.embeddings()
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if args.data:
        wanted = {s.sequence_id for s in _load_data(args.data)}
        rows = [(i, e) for i, e in zip(ids, table) if i in wanted]
    else:
        rows = list(zip(ids, table))
    header = "id," + ",".join(f"e{k}" for k in range(table.shape[1]))
    lines = [header] + [i + "," + ",".join(f"{v:.10g}" for v in e) for i, e in rows]
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _emit({"out": args.out, "n_sequences": len(rows), "dim": int(table.shape[1])})
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="iftpp", description="Temporal point processes with learned inter-event time densities")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic dataset")
    g.add_argument("kind", help=f"preset {sorted(gen.PRESETS)} or kind {list(gen.KINDS)}")
    g.add_argument("--param", action="append", help="override a parameter, key=JSON")
    g.add_argument("--n-seqs", type=int, default=64)
    g.add_argument("--n-events", type=int, default=1024)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mask-fraction", type=_fraction, help="remove a random interval, e.g. 1/3")
    g.add_argument("--out", help="JSONL output path (default: stdout)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--metrics", help="CSV of epoch, train_nll, val_nll")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="NLL of a checkpoint (or the true model) on data")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--true-model", metavar="PRESET", help="score with the generating process instead")
    e.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("sample", cmd_sample, "draw next inter-event times"),
                                 ("intensity", cmd_intensity, "conditional intensity on a grid (CSV)")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--history-file", required=(name == "intensity"))
        s.add_argument("--seq-id")
        s.add_argument("--meta", type=int, help="metadata category of the next event")
        s.add_argument("--embedding", help="comma-separated sequence embedding override")
        s.add_argument("--interpolate", nargs=2, metavar=("ID_A", "ID_B"))
        s.add_argument("--weight", type=float, default=0.5, help="interpolation weight on ID_B")
        if name == "sample":
            s.add_argument("--n", type=int, default=1)
            s.add_argument("--seed", type=int, default=0)
            s.add_argument("--sequence", action="store_true",
                           help="roll out n events autoregressively instead of n i.i.d. draws")
        else:
            s.add_argument("--grid", default="0.01:10:200", help="start:stop:num")
            s.add_argument("--out")
        s.set_defaults(func=func)

    i = sub.add_parser("impute", help="train with a missing interval and score the ground truth")
    i.add_argument("--strategy", choices=("none", "mean", "reparam", "all"), default="all")
    i.add_argument("--data", required=True, help="JSONL with 'gap' (and optionally 'ground_truth')")
    i.add_argument("--config", required=True)
    i.add_argument("--seq-id")
    i.add_argument("--steps", type=int, help="optimisation steps (default: max_epochs)")
    i.set_defaults(func=cmd_impute)

    m = sub.add_parser("embed", help="export learned sequence embeddings (CSV)")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_embed)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, DatasetFormatError, ConfigError) as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
