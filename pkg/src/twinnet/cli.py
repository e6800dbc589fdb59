"""``twinnet <command> --config PATH [--section.key=value ...] --out DIR``

Exit codes: 0 success, 1 a check failed, 2 usage / configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cells import sample as sample_tokens
from .checks import TinyConfig, run_gradcheck
from .config import Config, ConfigError
from .data import DataFormatError
from .diagnostics import emit_csv, frequency_cost_stats, rare_frequent_histogram, trace_dataset
from .experiments import load_bundle, model_spec, train_config
from .model import CheckpointError, init_model, load_checkpoint, save_checkpoint
from .train import TrainingDiverged, evaluate, load_training_checkpoint, train

log = logging.getLogger("twinnet")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
COMMANDS = ("train", "eval", "sample", "sweep", "gradcheck", "diagnose")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twinnet", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI run configuration (defaults apply to missing keys)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--checkpoint", help="model checkpoint (eval/sample/diagnose; train resumes from it)")
    p.add_argument("--corrupt", metavar="OP", help="gradcheck: scale the adjoint of OP (fault injection)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args, extra: list[str], fallback: str | None = None) -> Config:
    if args.config:
        cfg = Config.from_file(args.config)
    elif fallback:
        cfg = Config.from_string(fallback)
    else:
        cfg = Config()
    bad = [x for x in extra if not x.startswith("--") or "=" not in x]
    if bad:
        raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
    return cfg.override(extra)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required for this command")
    return load_checkpoint(args.checkpoint)


def _meta(cfg: Config, bundle) -> dict:
    meta = {"config": cfg.to_string(), "dataset": bundle.kind}
    if bundle.train.vocab is not None:
        meta["symbols"] = list(bundle.train.vocab.symbols)
    return meta


# ------------------------------------------------------------------ commands

def _train_once(cfg: Config, out: Path, resume: str | None = None):
    bundle = load_bundle(cfg)
    tcfg = train_config(cfg)
    spec = model_spec(cfg, bundle)
    state, rows = None, None
    if resume:
        model, state, rows = load_training_checkpoint(resume)
        if model.spec != spec:
            raise ConfigError("model", "checkpoint architecture differs from the configuration")
    else:
        model = init_model(spec, tcfg.seed)
    cfg.write(out / "config.ini")
    ck_path = out / "model.npz"
    res = train(model, bundle.train, bundle.valid, tcfg, state=state, log_rows=rows,
                checkpoint_path=out / "train_state.npz", metrics_path=out / "metrics.csv", progress=True)
    save_checkpoint(ck_path, res.model, meta=_meta(cfg, bundle))
    return res, bundle


def cmd_train(args, extra) -> int:
    cfg = _load_config(args, extra)
    out = _out_dir(args)
    res, _ = _train_once(cfg, out, args.checkpoint)
    best = res.state.best_valid
    print(f"trained {res.state.epoch} epochs, {res.state.step} steps; "
          f"best valid NLL {best:.4f} (epoch {res.state.best_epoch})" if math.isfinite(best)
          else f"trained {res.state.epoch} epochs; checkpoint written")
    print(f"wrote {out / 'model.npz'}, {out / 'metrics.csv'}, {out / 'config.ini'}")
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    ck = _checkpoint(args)
    cfg = _load_config(args, extra, ck.meta.get("config"))
    out = _out_dir(args)
    bundle = load_bundle(cfg)
    split = cfg.get("diagnose.split")
    ds = bundle.test if split == "test" and bundle.test is not None else bundle.valid
    res = evaluate(ck.model, ds, cfg.get("trainer.eval_batch_size"))
    line = f"{ds.name}: NLL {res.nll:.6f} nats/sequence, {res.bits_per_dim:.6f} bits/dim over {res.n} sequences"
    print(line)
    (out / "eval.json").write_text(json.dumps({"dataset": ds.name, "nll": res.nll,
                                               "bits_per_dim": res.bits_per_dim, "n": res.n},
                                              sort_keys=True) + "\n")
    return EXIT_OK


def write_pgm_grid(path: Path, images: np.ndarray, cols: int = 4, side: int = 28) -> Path:
    """Binary images (n, side*side) as one plain-text PGM, one pixel of padding between tiles."""
    n = len(images)
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * (side + 1) + 1, cols * (side + 1) + 1), dtype=np.int64)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = 1 + r * (side + 1), 1 + c * (side + 1)
        grid[y:y + side, x:x + side] = img.reshape(side, side)
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", "1"]
    lines += [" ".join(map(str, row)) for row in grid]
    path.write_text("\n".join(lines) + "\n")
    return path


def cmd_sample(args, extra) -> int:
    ck = _checkpoint(args)
    cfg = _load_config(args, extra, ck.meta.get("config"))
    out = _out_dir(args)
    s = cfg["sample"]
    model = ck.model
    bernoulli = model.spec.output == "bernoulli"
    natural = {"mnist": 784, "delayed-copy": cfg.get("dataset.copy_length")}
    length = s["length"] or natural.get(cfg.get("dataset.name"), cfg.get("dataset.seq_len"))
    cond = None
    if model.spec.cond_dim:
        labels = np.arange(s["n"]) % model.spec.cond_dim
        cond = np.eye(model.spec.cond_dim)[labels]
    # one call per sample when conditioning differs per row
    if cond is None:
        toks = sample_tokens(model.forward.stack, model.forward.head, length, s["seed"], s["temperature"],
                             n=s["n"])
    else:
        toks = np.concatenate([sample_tokens(model.forward.stack, model.forward.head, length,
                                             s["seed"] + i, s["temperature"], cond[i], 1)
                               for i in range(s["n"])])
    if bernoulli:
        side = int(round(math.sqrt(length)))
        if side * side != length:
            raise ConfigError("sample.length", "pixel samples need a square length")
        path = write_pgm_grid(out / "samples.pgm", toks, side=side)
    else:
        symbols = ck.meta.get("symbols")
        if symbols:
            text = "\n".join("".join(symbols[int(t)] for t in row) for row in toks)
        else:
            text = "\n".join(" ".join(map(str, row)) for row in toks)
        path = out / "samples.txt"
        path.write_text(text + "\n", encoding="utf-8")
    print(f"wrote {s['n']} samples to {path}")
    return EXIT_OK


def cmd_sweep(args, extra) -> int:
    cfg = _load_config(args, extra)
    alphas = cfg.get("sweep.alphas")
    if not alphas:
        raise ConfigError("sweep.alphas", "needs at least one value")
    out = _out_dir(args)
    cfg.write(out / "config.ini")
    rows = []
    for a in alphas:
        run_cfg = Config.from_string(cfg.to_string())
        run_cfg.set("objective.alpha", a)
        sub = out / f"alpha_{a:g}"
        sub.mkdir(exist_ok=True)
        res, _ = _train_once(run_cfg, sub)
        rows.append((a, res.state.best_valid, res.state.best_epoch))
    best = min(range(len(rows)), key=lambda i: (rows[i][1], i))
    lines = ["alpha,best_valid_nll,best_epoch,best"]
    table = [f"{'alpha':>8}  {'valid NLL':>12}  {'epoch':>5}"]
    for i, (a, v, e) in enumerate(rows):
        mark = "*" if i == best else ""
        lines.append(f"{a!r},{v!r},{e},{mark}")
        table.append(f"{a:>8g}  {v:>12.4f}  {e:>5d}  {mark}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(table))
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    cfg = _load_config(args, extra)
    g = cfg["gradcheck"]
    tiny = TinyConfig(hidden=g["hidden"], num_classes=g["num_classes"], length=g["length"], batch=g["batch"],
                      embed_dim=g["embed_dim"], cell=cfg.get("model.cell"), alpha=g["alpha"],
                      epsilon=g["epsilon"], seed=g["seed"], tolerance=g["tolerance"])
    if args.corrupt:
        if args.corrupt not in ad.FAULTABLE_OPS:
            raise UsageError(f"--corrupt: unknown op {args.corrupt!r}")
        with ad.inject_fault(args.corrupt):
            res = run_gradcheck(tiny)
    else:
        res = run_gradcheck(tiny)
    print(res.format())
    if args.out != ".":
        (_out_dir(args) / "gradcheck.txt").write_text(res.format() + "\n")
    return EXIT_OK if res.passed else EXIT_CHECK


def cmd_diagnose(args, extra) -> int:
    ck = _checkpoint(args)
    cfg = _load_config(args, extra, ck.meta.get("config"))
    if cfg.get("objective.backward_mode") != "twin":
        raise ConfigError("objective.backward_mode", "diagnostics need a twin-mode model")
    out = _out_dir(args)
    d = cfg["diagnose"]
    bundle = load_bundle(cfg)
    ds = bundle.test if d["split"] == "test" and bundle.test is not None else bundle.valid
    if d["max_sequences"]:
        ds = ds.subset(np.arange(min(d["max_sequences"], len(ds))))
    text = bundle.kind == "text"
    records = trace_dataset(ck.model, ds, cfg.get("trainer.eval_batch_size"), cfg.get("objective.g_mode"),
                            segment_words=text)
    emit_csv(records, out / "records.csv")
    written = ["records.csv"]
    vocab = ds.vocab
    if vocab is not None:
        for level in ("symbol", "word") if text else ("symbol",):
            stats = frequency_cost_stats(records, vocab, level, bundle.word_counts)
            emit_csv(stats, out / f"{level}_stats.csv")
            written.append(f"{level}_stats.csv")
            print(stats.summary())
            if 0 <= d["rare_cutoff"] < stats.n_symbols:
                emit_csv(rare_frequent_histogram(stats, d["rare_cutoff"], d["bins"]),
                         out / f"{level}_histogram.csv")
                written.append(f"{level}_histogram.csv")
    mean_pen = float(np.mean(np.concatenate([r.penalty for r in records])))
    print(f"{len(records)} sequences, mean L_t {mean_pen:.4f}; wrote {', '.join(written)} to {out}")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "sweep": cmd_sweep,
            "gradcheck": cmd_gradcheck, "diagnose": cmd_diagnose}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    try:
        return HANDLERS[args.command](args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, CheckpointError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
