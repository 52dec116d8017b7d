"""Command-line interface: ``erl <command> [flags]``.

Commands: ``index``, ``simulate``, ``evaluate``, ``annotate``, ``train``,
``compare``, ``plot`` and ``config``. Every flag can also be given through an
environment variable ``ERL_<FLAG>`` (``--top-k`` -> ``ERL_TOP_K``). Tunable
values resolve as flag > environment > ``--config`` file > built-in default.

Exit codes: 0 success, 1 usage, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import collections
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .corpus import CorpusError, TfIdfIndex, build_index, read_corpus_jsonl
from .erasure import ErasureConfig
from .metrics import evaluate_run
from .protocol import TransportError
from .rollout import (EngineConfig, Episode, EpisodeFailure, ExternalPolicy, ExternalRetriever,
                      PolicyStage, QAExample, ScriptedPolicy, read_dataset_jsonl, read_episode_answers,
                      run_dataset, write_annotations_jsonl, write_episodes_jsonl)
from .toy.ppo import TrainingDiverged
from .toy.train import ALGOS, TrainConfig, compare, save_result, train
from .toy.world import make_world, write_world

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
ENV_PREFIX = "ERL_"

log = logging.getLogger("erl")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# -- configuration -----------------------------------------------------------


def _fields(cls, skip=()) -> dict[str, Any]:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls) if f.name not in skip}


def default_config() -> dict[str, dict[str, Any]]:
    train = _fields(TrainConfig, skip=("erasure", "parallel"))
    train.update(hop_depth=2, n_entities=24)
    return {
        "engine": _fields(EngineConfig, skip=("erasure",)),
        "erasure": _fields(ErasureConfig, skip=("max_rounds",)),
        "train": train,
        "run": {"parallel": 1, "timeout": 30.0},
    }


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Flag:
    name: str
    type: Callable = str
    help: str = ""
    key: Optional[str] = None  # "section.field" for tunable values; None for paths
    choices: Optional[Sequence[str]] = None

    @property
    def dest(self) -> str:
        return self.name.lstrip("-").replace("-", "_")

    @property
    def env(self) -> str:
        return ENV_PREFIX + self.dest.upper()


F = {f.name: f for f in [
    Flag("--corpus", help="corpus file (JSON lines: id, title, text)"),
    Flag("--index", help="index file written by the index command"),
    Flag("--dataset", help="dataset file (JSON lines: id, question, golden_answers, sub_answers, evidence)"),
    Flag("--episodes", help="episode file written by simulate"),
    Flag("--policy", help="scripted:<path> or external:<endpoint>"),
    Flag("--retriever", help="optional external retriever endpoint (tcp://host:port or stdio:command)"),
    Flag("--out", help="output path"),
    Flag("--annotations", help="also write per-annotation records to this path"),
    Flag("--config", help="JSON config file"),
    Flag("--top-k", int, "documents per search", "engine.top_k"),
    Flag("--max-rounds", int, "round cap", "engine.max_rounds"),
    Flag("--alpha", float, "local erasure threshold", "erasure.alpha"),
    Flag("--beta-plan", float, "plan erasure threshold", "erasure.beta_plan"),
    Flag("--retries-plan", int, "plan erasure budget per episode", "erasure.max_retries_plan"),
    Flag("--retries-search", int, "search erasure budget per round", "erasure.max_retries_search"),
    Flag("--retries-sub-answer", int, "sub-answer erasure budget per round", "erasure.max_retries_sub_answer"),
    Flag("--erasure", _bool, "enable erasure (true/false)", "erasure.enabled"),
    Flag("--parallel", int, "concurrent episodes", "run.parallel"),
    Flag("--timeout", float, "seconds per external request", "run.timeout"),
    Flag("--algo", str, "training algorithm", "train.algo", ALGOS),
    Flag("--seed", int, "training seed (also the world seed)", "train.seed"),
    Flag("--iterations", int, "PPO iterations", "train.iterations"),
    Flag("--batch-size", int, "episodes per iteration", "train.batch_size"),
    Flag("--learning-rate", float, "tabular policy step size", "train.learning_rate"),
    Flag("--kl-coefficient", float, "KL penalty toward the reference policy", "train.kl_coefficient"),
    Flag("--clip-epsilon", float, "PPO clip range", "train.clip_epsilon"),
    Flag("--gamma", float, "discount", "train.gamma"),
    Flag("--gae-lambda", float, "GAE lambda", "train.gae_lambda"),
    Flag("--epochs", int, "gradient steps per batch", "train.epochs"),
    Flag("--eval-every", int, "iterations between evaluations", "train.eval_every"),
    Flag("--eval-samples", int, "sampled rollouts per example at evaluation", "train.eval_samples"),
    Flag("--value-rate", float, "baseline averaging rate", "train.value_rate"),
    Flag("--hop-depth", int, "synthetic world hop depth", "train.hop_depth"),
    Flag("--entities", int, "synthetic world entity count", "train.n_entities"),
    Flag("--seeds", str, "comma-separated seeds for compare"),
    Flag("--curves", str, "comma-separated curve files for plot"),
]}

# train reuses --top-k / --max-rounds for its own rollout settings
_TRAIN_KEYS = {"--top-k": "train.top_k", "--max-rounds": "train.max_rounds"}
_ENGINE = ["--top-k", "--max-rounds", "--alpha", "--beta-plan", "--retries-plan", "--retries-search",
           "--retries-sub-answer", "--erasure"]
_TRAIN = ["--algo", "--seed", "--iterations", "--batch-size", "--learning-rate", "--kl-coefficient",
          "--clip-epsilon", "--gamma", "--gae-lambda", "--epochs", "--eval-every", "--eval-samples",
          "--value-rate", "--hop-depth", "--entities"]

COMMANDS: dict[str, tuple[str, list[str]]] = {
    "index": ("build a TF-IDF index from a corpus", ["--corpus", "--out"]),
    "simulate": ("roll out a policy over a dataset",
                 ["--dataset", "--policy", "--index", "--corpus", "--retriever", "--out", "--annotations",
                  "--config", "--parallel", "--timeout"] + _ENGINE),
    "evaluate": ("score episode answers against a dataset", ["--episodes", "--dataset", "--out"]),
    "annotate": ("export reward annotations from an episode file", ["--episodes", "--out"]),
    "train": ("train the toy policy on a synthetic world",
              ["--out", "--config", "--parallel"] + _ENGINE + _TRAIN),
    "compare": ("sparse PPO vs ERL over several seeds",
                ["--seeds", "--out", "--config"] + _ENGINE + [f for f in _TRAIN if f not in ("--algo", "--seed")]),
    "plot": ("plot learning curves to an image file", ["--curves", "--out"]),
    "config": ("print the resolved configuration (or write it with --out)",
               ["--config", "--out", "--parallel", "--timeout"] + _ENGINE + _TRAIN),
}
_REQUIRED = {
    "index": ["--corpus", "--out"],
    "simulate": ["--dataset", "--policy", "--out"],
    "evaluate": ["--episodes", "--dataset"],
    "annotate": ["--episodes", "--out"],
    "plot": ["--curves", "--out"],
}


def _key(cmd: str, flag: Flag) -> Optional[str]:
    if cmd in ("train", "compare") and flag.name in _TRAIN_KEYS:
        return _TRAIN_KEYS[flag.name]
    return flag.key


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    defaults = default_config()
    parser = _Parser(prog="erl", description=__doc__.split("\n\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter,
                     epilog="Exit codes: 0 success, 1 usage, 2 data error, 3 runtime failure.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, (help_text, names) in COMMANDS.items():
        p = sub.add_parser(cmd, help=help_text, description=help_text)
        if cmd == "config":
            p.add_argument("action", nargs="?", choices=("show", "write"), default="show")
        for name in names:
            flag = F[name]
            key = _key(cmd, flag)
            if key:
                section, fname = key.split(".")
                default = f"default: {defaults[section][fname]}"
            else:
                default = "required" if name in _REQUIRED.get(cmd, ()) else "default: none"
            p.add_argument(name, dest=flag.dest, type=flag.type, choices=flag.choices, default=None,
                           metavar=flag.dest.upper(), help=f"{flag.help} ({default}; env {flag.env})")
    return parser


def load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from None
    defaults = default_config()
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = [f"{s}" for s in data if s not in defaults]
    unknown += [f"{s}.{k}" for s, vals in data.items() if s in defaults
                for k in (vals if isinstance(vals, dict) else {"<not an object>": 0}) if k not in defaults[s]]
    if unknown:
        raise UsageError(f"unknown config keys in {path}: {', '.join(sorted(unknown))}")
    return data


def resolve(args: argparse.Namespace, cmd: str, environ=None) -> dict[str, dict[str, Any]]:
    """Fill every flag from the environment when absent, then merge flag > env > file > default."""
    environ = os.environ if environ is None else environ
    for name in COMMANDS[cmd][1]:
        flag = F[name]
        if getattr(args, flag.dest, None) is None and flag.env in environ:
            raw = environ[flag.env]
            try:
                value = flag.type(raw)
            except (ValueError, argparse.ArgumentTypeError):
                raise UsageError(f"bad value {raw!r} for {flag.env}") from None
            if flag.choices and value not in flag.choices:
                raise UsageError(f"{flag.env} must be one of {', '.join(flag.choices)}")
            setattr(args, flag.dest, value)
    config = default_config()
    file_cfg = load_config_file(getattr(args, "config", None))
    for section, values in file_cfg.items():
        config[section].update(values)
    for name in COMMANDS[cmd][1]:
        flag = F[name]
        key = _key(cmd, flag)
        value = getattr(args, flag.dest, None)
        if key and value is not None:
            section, fname = key.split(".")
            config[section][fname] = value
    for name in _REQUIRED.get(cmd, ()):
        if getattr(args, F[name].dest, None) is None:
            raise UsageError(f"erl {cmd}: {name} is required (or set {F[name].env})")
    return config


def erasure_config(config: dict, max_rounds: int) -> ErasureConfig:
    try:
        return ErasureConfig(**config["erasure"], max_rounds=max_rounds)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid erasure config: {exc}") from None


def engine_config(config: dict) -> EngineConfig:
    eng = config["engine"]
    try:
        return EngineConfig(eng["top_k"], eng["max_rounds"], erasure_config(config, eng["max_rounds"]))
    except ValueError as exc:
        raise UsageError(f"invalid engine config: {exc}") from None


def train_config(config: dict, **override) -> tuple[TrainConfig, int, int]:
    values = dict(config["train"])
    hop_depth, n_entities = values.pop("hop_depth"), values.pop("n_entities")
    values.update(override)
    try:
        cfg = TrainConfig(**values, parallel=config["run"]["parallel"],
                          erasure=erasure_config(config, values.get("max_rounds") or hop_depth + 2))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    return cfg, hop_depth, n_entities


# -- commands ----------------------------------------------------------------


def _load_index(args) -> TfIdfIndex:
    if args.index:
        return TfIdfIndex.load(args.index)
    if args.corpus:
        return build_index(read_corpus_jsonl(args.corpus))
    raise UsageError("one of --index or --corpus is required")


def load_script(path: str) -> Callable[[QAExample], ScriptedPolicy]:
    """Scripted policy file: a list of slots, or ``{"default": [...], "examples": {id: [...]}}``.

    A slot is ``{"round": int, "stage": str, "alternatives": [str, ...]}``.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, list):
        data = {"default": data}
    default = data.get("default")
    per_example = data.get("examples", {})
    policies = {eid: ScriptedPolicy.from_records(slots) for eid, slots in per_example.items()}
    fallback = ScriptedPolicy.from_records(default) if default is not None else None

    def factory(example: QAExample) -> ScriptedPolicy:
        pol = policies.get(example.id, fallback)
        if pol is None:
            raise KeyError(f"script has no entry for example {example.id!r}")
        return pol

    return factory


def cmd_index(args, config) -> int:
    index = build_index(read_corpus_jsonl(args.corpus))
    index.save(args.out)
    print(f"{index.doc_count} documents indexed, {len(index.vocabulary)} terms -> {args.out}")
    return EXIT_OK


def cmd_simulate(args, config) -> int:
    engine = engine_config(config)
    index = _load_index(args)
    dataset = list(read_dataset_jsonl(args.dataset))
    kind, _, target = args.policy.partition(":")
    timeout = config["run"]["timeout"]
    if kind == "scripted":
        policy = load_script(target)
    elif kind == "external":
        policy = ExternalPolicy(target, timeout=timeout)
    else:
        raise UsageError(f"--policy must be scripted:<path> or external:<endpoint>, got {args.policy!r}")
    retriever = ExternalRetriever(args.retriever, timeout=timeout) if args.retriever else None
    results = list(run_dataset(dataset, policy, engine, index, retriever, config["run"]["parallel"]))
    write_episodes_jsonl(results, args.out)
    episodes = [r for r in results if isinstance(r, Episode)]
    failures = [r for r in results if isinstance(r, EpisodeFailure)]
    if args.annotations:
        write_annotations_jsonl(episodes, args.annotations)
    counts = collections.Counter(e.decision.category.value for ep in episodes
                                 for e in ep.erasure_events if e.decision.fires)
    exhausted = sum(e.budget_exhausted for ep in episodes for e in ep.erasure_events)
    print(f"{len(episodes)} episodes, {len(failures)} failures -> {args.out}")
    print("erasures: " + ", ".join(f"{k} {counts.get(k, 0)}" for k in
                                   ("erase_plan", "erase_search", "erase_sub_answer"))
          + f"; budget exhausted {exhausted}")
    for f in failures:
        print(f"failed {f.example_id}: {f.error}", file=sys.stderr)
    if dataset and not episodes:
        raise RuntimeFailure("every episode failed")
    return EXIT_OK


def cmd_evaluate(args, config) -> int:
    dataset = {ex.id: list(ex.golden_answers) for ex in read_dataset_jsonl(args.dataset)}
    try:
        report = evaluate_run(read_episode_answers(args.episodes), dataset)
    except KeyError as exc:
        raise DataError(exc.args[0] if exc.args else str(exc)) from None
    print(report.table())
    print(report.summary_line())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for rec in report.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_annotate(args, config) -> int:
    n = 0
    with open(args.episodes, encoding="utf-8") as src, open(args.out, "w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "error" in rec:
                continue
            for ann in rec["annotations"]:
                dst.write(json.dumps({"id": rec["id"], **ann, "mask_spans": rec["mask_spans"]},
                                     sort_keys=True) + "\n")
                n += 1
    print(f"{n} annotations -> {args.out}")
    return EXIT_OK


def cmd_train(args, config) -> int:
    cfg, hop_depth, n_entities = train_config(config)
    out = Path(args.out or "train_out")
    world = make_world(cfg.seed, hop_depth, n_entities)
    write_world(world[1], world[2], out)
    try:
        result = train(world, cfg)
    except TrainingDiverged as exc:
        if getattr(exc, "curve", None):
            from .toy.train import TrainResult
            save_result(TrainResult(cfg.algo, cfg.seed, exc.curve, exc.last_policy), out)
        raise RuntimeFailure(f"training diverged: {exc} {exc.diagnostics}") from None
    curve_path, policy_path = save_result(result, out)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{cfg.algo} seed {cfg.seed}: final EM {result.final_em:.3f} -> {curve_path}, {policy_path}")
    return EXIT_OK


def cmd_compare(args, config) -> int:
    base, hop_depth, n_entities = train_config(config)
    try:
        seeds = [int(s) for s in (args.seeds or "1,2,3,4,5").split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    result = compare(seeds, hop_depth, n_entities, base)
    print(result.table())
    print(f"ERL >= sparse PPO on every seed: {result.erl_never_worse}; "
          f"ERL mean strictly greater: {result.erl_better_on_mean}")
    if args.out:
        Path(args.out).write_text(json.dumps(result.to_record(), sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_plot(args, config) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise RuntimeFailure("plotting needs matplotlib (pip install 'artifact[plot]')") from None
    fig, (ax_em, ax_r) = plt.subplots(1, 2, figsize=(10, 4))
    for path in args.curves.split(","):
        recs = [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
        its = [r["iteration"] for r in recs]
        ax_em.plot(its, [r["em"] for r in recs], marker="o", label=Path(path).stem)
        ax_r.plot(its, [r["mean_reward"] for r in recs], marker="o", label=Path(path).stem)
    ax_em.set(xlabel="iteration", ylabel="EM")
    ax_r.set(xlabel="iteration", ylabel="mean training reward")
    ax_em.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"plot -> {args.out}")
    return EXIT_OK


def cmd_config(args, config) -> int:
    text = json.dumps(config, indent=2, sort_keys=True) + "\n"
    if args.action == "write":
        if not args.out:
            raise UsageError("config write needs --out")
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"config -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


HANDLERS = {
    "index": cmd_index, "simulate": cmd_simulate, "evaluate": cmd_evaluate, "annotate": cmd_annotate,
    "train": cmd_train, "compare": cmd_compare, "plot": cmd_plot, "config": cmd_config,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = resolve(args, args.command)
        return HANDLERS[args.command](args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError,
            KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeFailure, TransportError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
