"""Command-line entry points: gen-data, train, eval, run, repl, trace, grad-check."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# option name -> (type, default, help); shared by flags and config files
COMMON = {
    "seed": (int, 0, "random seed"),
    "out": (str, "out", "output directory"),
}
MODEL = {
    "layers": (int, 2, "agent transformer layers"),
    "d_model": (int, 64, "agent width (also the encoding summary width)"),
    "heads": (int, 4, "attention heads"),
    "ffn": (int, 128, "feed-forward width"),
    "levels": (int, 4, "vision network levels"),
    "vocab_size": (int, 512, "maximum vocabulary size"),
}
DATA = {
    "kinds": (str, "segment,classify_intensity", "comma-separated task kinds"),
    "n": (int, 16, "number of instances to generate"),
    "rois": (str, "", "comma-separated ROI names for segment-type tasks (default: all)"),
}
TRAIN = {
    "data": (str, "", "dataset shard directory (default: generate --n-train instances)"),
    "n_train": (int, 64, "instances to generate when --data is not given"),
    "lr": (float, 1e-4, "learning rate"),
    "accumulation": (int, 10, "gradient accumulation steps per update"),
    "lam": (float, 0.1, "weight of the soft Dice terms"),
    "bce": (float, 0.0, "weight of an extra logit-space BCE term inside each image loss"),
    "clip": (float, 0.0, "cap on the global gradient norm per update (0 disables)"),
    "patience": (int, 500, "updates without improvement before halving the learning rate"),
    "max_halvings": (int, 4, "halvings before training stops"),
    "max_updates": (int, 1000, "update budget"),
    "checkpoint_every": (int, 0, "periodic checkpoint interval in updates (0: final only)"),
}
EVAL = {
    "checkpoint": (str, "", "checkpoint file"),
    "data": (str, "", "dataset shard directory"),
    "max_steps": (int, 8, "agent step limit"),
}
RUN = {
    "checkpoint": (str, "", "checkpoint file (omit to use --program or an untrained model)"),
    "program": (str, "", "file with scripted step programs separated by '---' lines"),
    "prompt": (str, "", "instruction prompt"),
    "vol": (list, [], "input volume file (repeatable)"),
    "modality": (str, "T1w", "modality recorded in the volume metadata"),
    "max_steps": (int, 8, "agent step limit"),
}

COMMANDS = {
    "gen-data": ("emit a dataset shard of synthetic task instances", {**COMMON, **DATA}),
    "train": ("train the agent and vision networks", {**COMMON, **MODEL, **TRAIN, **{k: DATA[k] for k in ("kinds", "rois")}}),
    "eval": ("evaluate a checkpoint on a dataset shard", {**COMMON, **EVAL}),
    "run": ("run one prompt on volume files; prints the transcript", {**COMMON, **MODEL, **RUN}),
    "repl": ("interactive loop: type prompts, transcripts are printed and masks written", {**COMMON, **MODEL, **RUN}),
    "trace": ("pretty-print a saved transcript", {}),
    "grad-check": ("finite-difference gradient suite", {"seed": COMMON["seed"]}),
}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxagent", description="Language-driven volumetric imaging agent (desk scale).")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, (help_text, opts) in COMMANDS.items():
        sp = sub.add_parser(cmd, help=help_text, description=help_text)
        if cmd == "trace":
            sp.add_argument("transcript", help="transcript file written by run/repl")
            continue
        sp.add_argument("--config", help="key=value file; command-line flags override its values")
        for name, (typ, default, h) in opts.items():
            if typ is list:
                sp.add_argument(_flag(name), dest=name, action="append", default=argparse.SUPPRESS, help=h)
            else:
                sp.add_argument(_flag(name), dest=name, type=typ, default=argparse.SUPPRESS, help=f"{h} (default: {default})")
    return p


def read_config(path, opts: dict) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in opts:
            raise UsageError(f"{path}:{n}: unknown config key '{key}'")
        typ = opts[key][0]
        try:
            out[key] = [v.strip() for v in val.split(",") if v.strip()] if typ is list else typ(val)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: bad value for '{key}': {val}") from exc
    return out


def resolve_options(cmd: str, ns: argparse.Namespace) -> dict:
    opts = COMMANDS[cmd][1]
    merged = {k: (list(v[1]) if v[0] is list else v[1]) for k, v in opts.items()}
    if getattr(ns, "config", None):
        merged.update(read_config(ns.config, opts))
    for k in opts:
        if hasattr(ns, k):
            merged[k] = getattr(ns, k)
    return merged


# ---------------------------------------------------------------------------
# commands


def _split(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _task_config(o):
    from .taskgen import TaskConfig

    rois = _split(o.get("rois", ""))
    return TaskConfig(rois=tuple(rois)) if rois else TaskConfig()


def _configs(o):
    from .agent import AgentConfig
    from .visionnet import NetConfig

    acfg = AgentConfig(layers=o["layers"], d_model=o["d_model"], heads=o["heads"], ffn=o["ffn"])
    ncfg = NetConfig(levels=o["levels"], summary_dim=acfg.d_model, phi_dim=acfg.phi_dim)
    return acfg, ncfg


def _kinds(o):
    from .taskgen import TASK_KINDS

    kinds = _split(o["kinds"])
    bad = [k for k in kinds if k not in TASK_KINDS]
    if bad or not kinds:
        raise UsageError(f"unknown task kind(s): {', '.join(bad) or '(none)'}; choose from {', '.join(TASK_KINDS)}")
    return kinds


def cmd_gen_data(o, out):
    from .taskgen import write_shard
    from .training import sample_tasks

    kinds = _kinds(o)
    tasks = sample_tasks({k: 1.0 for k in kinds}, o["n"], o["seed"], task_config=_task_config(o))
    path = write_shard(tasks, o["out"])
    out.write(f"instances={len(tasks)}\nmanifest={path}\n")
    return EXIT_OK


def cmd_train(o, out):
    from . import report
    from .taskgen import read_shard
    from .training import TrainConfig, build_models, format_report, save_checkpoint, train, vocab_for

    kinds = _kinds(o)
    cfg = TrainConfig(
        lr=o["lr"],
        accumulation=o["accumulation"],
        lam=o["lam"],
        bce=o["bce"],
        clip=o["clip"],
        patience=o["patience"],
        max_halvings=o["max_halvings"],
        seed=o["seed"],
        max_updates=o["max_updates"],
        task_mix={k: 1.0 for k in kinds},
        n_train=o["n_train"],
        checkpoint_every=o["checkpoint_every"],
    )
    if o["data"]:
        tasks = read_shard(o["data"])
    else:
        from .training import default_tasks

        tasks = default_tasks(cfg, task_config=_task_config(o))
    acfg, ncfg = _configs(o)
    models = build_models(vocab_for(tasks, max_size=o["vocab_size"]), acfg, ncfg, seed=cfg.seed)
    od = Path(o["out"])
    od.mkdir(parents=True, exist_ok=True)
    res = train(cfg, tasks, models, out_dir=od)
    ckpt = save_checkpoint(od / "final.vxck", res.models, res.optimizer, res.updates, cfg)
    last = res.history[-1]
    metrics = {
        "updates": res.updates,
        "instances": len(tasks),
        "final_loss": last["loss"],
        "final_ce": last["ce"],
        "final_img": last["img"],
        "final_token_accuracy": last["token_acc"],
        "final_lr": res.optimizer.lr,
        "halvings": res.schedule.halvings,
    }
    text = format_report(metrics)
    (od / "train_report.txt").write_text(text)
    with open(od / "history.txt", "w") as fh:
        for h in res.history:
            fh.write(" ".join(f"{k}={v!r}" for k, v in h.items()) + "\n")
    report.loss_curve(res.history, od / "loss_curve.png")
    out.write(text + f"checkpoint={ckpt}\nfigure={od / 'loss_curve.png'}\n")
    return EXIT_OK


def cmd_eval(o, out):
    from . import report
    from .taskgen import read_shard
    from .training import evaluate, format_report, load_checkpoint

    if not o["checkpoint"] or not o["data"]:
        raise UsageError("eval needs --checkpoint and --data")
    ck = load_checkpoint(o["checkpoint"])
    tasks = read_shard(o["data"])
    od = Path(o["out"])
    metrics = evaluate(ck.models, tasks, out_dir=od, max_steps=o["max_steps"])
    text = format_report(metrics)
    od.mkdir(parents=True, exist_ok=True)
    (od / "eval_report.txt").write_text(text)
    if metrics:
        report.metric_bars(metrics, od / "metrics.png")
    out.write(text)
    if metrics:
        out.write(f"figure={od / 'metrics.png'}\n")
    return EXIT_OK


class Session:
    """Model state shared by ``run`` and ``repl``."""

    def __init__(self, o):
        from .agent import build_vocab
        from .training import build_models, load_checkpoint

        self.o = o
        self.steps = None
        if o["program"]:
            text = Path(o["program"]).read_text()
            self.steps = [s.strip("\n") for s in text.split("\n---\n")]
        if o["checkpoint"]:
            self.models = load_checkpoint(o["checkpoint"]).models
        else:
            from .taskgen import default_grammar

            corpus = [" ".join(v) for v in default_grammar().choices.values()] + (self.steps or [])
            acfg, ncfg = _configs(o)
            self.models = build_models(build_vocab(corpus, o["vocab_size"]), acfg, ncfg, seed=o["seed"])
        self.count = 0

    def run(self, prompt: str, vol_paths: list[str], out) -> int:
        from . import report
        from .runtime import Executor, ModelPolicy, OraclePolicy, VolumeInput, agent_loop, save_transcript
        from .voxelcore import read_volume

        if not prompt:
            raise UsageError("a prompt is required")
        vols = [VolumeInput(f"v{i}", read_volume(p), self.o["modality"]) for i, p in enumerate(vol_paths, 1)]
        m = self.models
        if self.steps is not None:
            policy = OraclePolicy(self.steps, m.vocab, m.agent.config.phi_dim)
        else:
            policy = ModelPolicy(m.agent, m.vocab)
        tr = agent_loop(prompt, vols, policy, m.vocab, Executor(m.vision), max_steps=self.o["max_steps"], max_len=m.agent.config.max_len)
        self.count += 1
        stem = f"run{self.count:03d}"
        od = Path(self.o["out"])
        path = save_transcript(tr, od, stem)
        out.write(path.read_text())
        if vols:
            for i, (name, mk) in enumerate(tr.masks, 1):
                ref = mk.prob.reference.values if mk.prob is not None else vols[0].grid.values
                report.mask_overlay(ref, mk.mask.values, od / f"{stem}_mask{i}_{name}.png")
        return EXIT_OK


def cmd_run(o, out):
    if not o["vol"]:
        raise UsageError("run needs at least one --vol")
    return Session(o).run(o["prompt"], o["vol"], out)


def cmd_repl(o, out, stdin=None):
    stdin = stdin or sys.stdin
    session = Session(o)
    out.write("Type a prompt (empty line or EOF to quit).\n")
    while True:
        out.write("> ")
        out.flush()
        line = stdin.readline()
        if not line or not line.strip():
            break
        try:
            session.run(line.strip(), o["vol"], out)
        except Exception as exc:  # keep the session alive
            out.write(f"error: {exc}\n")
    return EXIT_OK


def cmd_trace(path, out):
    from .runtime import parse_transcript

    t = parse_transcript(Path(path).read_text())
    out.write(f"Prompt: {t['prompt']}\n")
    for i, s in enumerate(t["steps"], 1):
        out.write(f"\n== step {i}  ({s['phi_count']} phi)  {s['outcome']}\n")
        for ln in s["code"].splitlines():
            out.write(f"   | {ln}\n")
        for f in s["feedback"]:
            out.write(f"   > {f}\n")
    out.write(f"\nAnswer: {t['answer'] if t['answer'] else '(none)'}\n")
    out.write(f"Complete: {'yes' if t['complete'] else 'no'}\n")
    for name, p in t["masks"]:
        out.write(f"Mask {name}: {p}\n")
    return EXIT_OK


def cmd_grad_check(o, out):
    from .tensor import run_suite

    results = run_suite(seed=o["seed"])
    out.write(f"{'op':<24}{'max_rel_err':>14}  status\n")
    ok = True
    for name, err in results.items():
        passed = err < 1e-4
        ok &= passed
        out.write(f"{name:<24}{err:>14.3e}  {'ok' if passed else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_FAILURE


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if ns.command == "trace":
            return cmd_trace(ns.transcript, out)
        o = resolve_options(ns.command, ns)
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "run": cmd_run,
            "repl": cmd_repl,
            "grad-check": cmd_grad_check,
        }[ns.command]
        return handler(o, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
