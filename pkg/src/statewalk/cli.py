"""Command-line front end.

Each subcommand reads an optional JSON config, applies flag overrides, runs
one pipeline stage, and leaves a self-describing run directory: outputs plus
a ``manifest.json`` recording the resolved config, input hashes, seed, and
library versions. Manifests carry no timestamps, so identical invocations
produce identical bytes.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 failed --check.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from . import automata as au
from . import metrics as me
from . import uncertainty as un
from .cartpole import AgentConfig, evaluate_agent, train_agent, write_curve_csv
from .model import (Ensemble, ModelConfig, StateModel, TrainSettings,
                    TrainingDiverged, mc_predict, train, train_ensemble)
from .rng import stream_rng

TASKS = ("tomita", "pa", "synthetic-classify", "ood", "rl")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3


class CliError(Exception):
    """Runtime failure: missing file, bad artifact, diverged training."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for runtime
    # failures, so usage problems are remapped to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ----------------------------------------------------------------------
# config plumbing


def _default_config(task: str) -> dict:
    model = asdict(ModelConfig(vocab_size=3))
    data: dict = {}
    trainer = {"updates": 4000, "validate_every": 100}
    if task == "tomita":
        model.update(vocab_size=3, hidden_dim=100, state_count=10, cell="gru")
        data = {"max_len": 10, "n": 2000, "valid_fraction": 0.2}
    elif task == "pa":
        model.update(vocab_size=2, state_count=4, cell="gru",
                     output="states", pa_targets=True)
        data = {"benchmark": "sl2", "min_len": 1, "max_len": 10,
                "n": None, "duplicates": 10, "valid_fraction": 0.1}
    elif task == "synthetic-classify":
        model.update(vocab_size=3, hidden_dim=100, state_count=10, cell="gru")
        data = {"max_len": 10, "n": 2000, "flip_prob": 0.15, "valid_fraction": 0.2}
    elif task == "ood":
        model.update(vocab_size=3, hidden_dim=100, state_count=10, cell="gru")
        data = {"max_len": 10, "n": 2000, "valid_fraction": 0.2,
                "ood_min_len": 12, "ood_max_len": 20, "ood_p_one": 0.9}
    elif task == "rl":
        data = {}
    return {"task": task, "seed": 0, "model": model, "data": data,
            "train": trainer}


def load_config(task: str, path: str | None, overrides: dict) -> dict:
    """Defaults <- JSON file <- CLI flags, later layers win."""
    cfg = _default_config(task)
    if path is not None:
        if not os.path.exists(path):
            raise CliError(f"config file not found: {path}")
        with open(path) as f:
            loaded = json.load(f)
        if "task" in loaded and loaded["task"] != task:
            raise CliError(f"config is for task {loaded['task']!r}, "
                           f"subcommand expects {task!r}")
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, field_name = dotted.partition(".")
        if field_name:
            cfg.setdefault(section, {})[field_name] = value
        else:
            cfg[section] = value
    return cfg


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, command: str, cfg: dict,
                   inputs: dict[str, str] | None = None) -> None:
    blob = json.dumps(cfg, sort_keys=True).encode()
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "inputs": {name: _sha256_file(p) for name, p in (inputs or {}).items()},
        "seed": cfg.get("seed"),
        "versions": {
            "statewalk": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _prepare_out(out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    marker = os.path.join(out_dir, "FAILED")
    if os.path.exists(marker):
        os.remove(marker)


def _mark_failed(out_dir: str, message: str) -> None:
    try:
        with open(os.path.join(out_dir, "FAILED"), "w") as f:
            f.write(message + "\n")
    except OSError:
        pass


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


# ----------------------------------------------------------------------
# dataset plumbing shared by subcommands


def _alphabet(cfg: dict) -> list[str]:
    return list(cfg.get("data", {}).get("alphabet", ["0", "1"]))


def _generate(cfg: dict) -> tuple[list, list]:
    """(train, valid) LabeledSequence lists for the config's task."""
    task = cfg["task"]
    data = cfg["data"]
    rng = stream_rng(cfg["seed"], "data")
    if task == "pa":
        pa = au.benchmark_pas()[data["benchmark"]]
        full = au.pa_generate(pa, (data["min_len"], data["max_len"]),
                              data["n"], rng, duplicates=data["duplicates"])
    elif task == "synthetic-classify":
        full = au.generate_noisy_dataset(data["n"], data["max_len"],
                                         data["flip_prob"], rng)
    else:
        full = au.generate_tomita_dataset(data["max_len"], data["n"], rng)
    return au.split_dataset(full, data["valid_fraction"], rng)


def _load_tsv(path: str) -> list[au.LabeledSequence]:
    return au.dataset_load(_require(path, "dataset"))


def _encode_for(model: StateModel, dataset, alphabet: list[str]):
    start = model.cfg.vocab_size == len(alphabet) + 1
    return au.encode_dataset(dataset, alphabet, start)


def _model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as err:
        raise CliError(f"bad model config: {err}") from err


# ----------------------------------------------------------------------
# subcommand bodies


def cmd_gen_data(cfg: dict, args) -> int:
    out = args.out
    _prepare_out(out)
    train_set, valid_set = _generate(cfg)
    au.dataset_save(train_set, os.path.join(out, "train.tsv"))
    au.dataset_save(valid_set, os.path.join(out, "valid.tsv"))
    if cfg["task"] == "ood":
        data = cfg["data"]
        rng = stream_rng(cfg["seed"], "data")
        shifted = au.generate_shifted_dataset(
            len(valid_set), data["ood_min_len"], data["ood_max_len"],
            data["ood_p_one"], rng)
        au.dataset_save(shifted, os.path.join(out, "ood.tsv"))
    write_manifest(out, "gen-data", cfg)
    print(f"wrote {len(train_set)} train / {len(valid_set)} valid sequences to {out}")
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    out = args.out
    _prepare_out(out)
    alphabet = _alphabet(cfg)
    if args.data_dir:
        train_set = _load_tsv(os.path.join(args.data_dir, "train.tsv"))
        valid_set = _load_tsv(os.path.join(args.data_dir, "valid.tsv"))
        inputs = {"train.tsv": os.path.join(args.data_dir, "train.tsv"),
                  "valid.tsv": os.path.join(args.data_dir, "valid.tsv")}
    else:
        train_set, valid_set = _generate(cfg)
        inputs = {}
    model = StateModel(_model_config(cfg))
    enc_train = _encode_for(model, train_set, alphabet)
    enc_valid = _encode_for(model, valid_set, alphabet)
    settings = TrainSettings(updates=cfg["train"]["updates"],
                             validate_every=cfg["train"]["validate_every"])
    members = cfg["train"].get("ensemble_members", 0)
    try:
        if members:
            ensemble, logs = train_ensemble(model.cfg, enc_train, enc_valid,
                                            members, settings,
                                            base_seed=cfg["seed"])
            for i, (member, log) in enumerate(zip(ensemble.members, logs)):
                member.save(os.path.join(out, f"model_{i}.bin"))
                log.to_csv(os.path.join(out, f"train_log_{i}.csv"))
            best = max(log.best_accuracy for log in logs)
        else:
            log = train(model, enc_train, enc_valid, settings, seed=cfg["seed"])
            model.save(os.path.join(out, "model.bin"))
            log.to_csv(os.path.join(out, "train_log.csv"))
            best = log.best_accuracy
    except TrainingDiverged as err:
        raise CliError(f"training diverged: {err}") from err
    write_manifest(out, "train", cfg, inputs)
    print(f"best validation accuracy {best:.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_extract_dfa(cfg: dict, args) -> int:
    out = args.out
    _prepare_out(out)
    alphabet = _alphabet(cfg)
    model = StateModel.load(_require(args.model, "model checkpoint"))
    dataset = _load_tsv(args.data)
    rng = stream_rng(cfg["seed"], "eval")
    dfa = au.extract_dfa(model, dataset, alphabet, rng)
    dot_path = os.path.join(out, "dfa.dot")
    with open(dot_path, "w") as f:
        f.write(dfa.to_dot())
    write_manifest(out, "extract-dfa", cfg,
                   {"model": args.model, "data": args.data})
    print(f"extracted {len(dfa.states)}-state automaton to {dot_path}")
    if args.check:
        ok, counterexample = au.dfa_equivalent(dfa, au.TOMITA3_DFA,
                                               max_len=args.check_max_len)
        if not ok:
            print(f"check failed: disagrees with reference on {counterexample!r}")
            return EXIT_CHECK
        print(f"check passed: language-equivalent up to length {args.check_max_len}")
    return EXIT_OK


def cmd_extract_pa(cfg: dict, args) -> int:
    out = args.out
    _prepare_out(out)
    alphabet = _alphabet(cfg)
    model = StateModel.load(_require(args.model, "model checkpoint"))
    dataset = _load_tsv(args.data)
    rng = stream_rng(cfg["seed"], "eval")
    pa = au.extract_pa(model, dataset, alphabet, rng)
    merged = au.merge_states(pa, args.merge_tol)
    with open(os.path.join(out, "pa.json"), "w") as f:
        json.dump(merged.to_json(), f, indent=2)
        f.write("\n")
    with open(os.path.join(out, "pa.dot"), "w") as f:
        f.write(merged.to_dot())
    write_manifest(out, "extract-pa", cfg,
                   {"model": args.model, "data": args.data})
    print(f"extracted {len(pa.states)} states, merged to {len(merged.states)} "
          f"(tol {args.merge_tol})")
    if args.check:
        reference = au.benchmark_pas()[cfg["data"]["benchmark"]]
        worst = 0.0
        for (q, sym), row in reference.kernel.items():
            want = sum(p for s, p in row.items() if s in reference.accepting)
            got = _merged_accept_mass(merged, reference, q, sym)
            if got is None:
                print(f"check failed: no merged row for ({q}, {sym!r})")
                return EXIT_CHECK
            worst = max(worst, abs(got - want))
        if worst > args.tolerance:
            print(f"check failed: worst accept-mass gap {worst:.4f} > {args.tolerance}")
            return EXIT_CHECK
        print(f"check passed: worst accept-mass gap {worst:.4f}")
    return EXIT_OK


def _merged_accept_mass(merged: au.Pa, reference: au.Pa, q, sym):
    """Accept mass of the merged row matched to reference state q by walking."""
    # map a reference state to a merged state by replaying a shortest string
    # that reaches q in the reference; both automata start at their q0.
    target = _reach_string(reference, q)
    if target is None:
        return None
    state = merged.q0
    for ch in target:
        row = merged.kernel.get((state, ch))
        if row is None:
            return None
        state = max(row, key=row.get)
    row = merged.kernel.get((state, sym))
    if row is None:
        return None
    return sum(p for s, p in row.items() if s in merged.accepting)


def _reach_string(pa: au.Pa, target) -> str | None:
    from collections import deque

    seen = {pa.q0}
    queue = deque([(pa.q0, "")])
    while queue:
        state, prefix = queue.popleft()
        if state == target:
            return prefix
        for (q, sym), row in sorted(pa.kernel.items()):
            if q != state:
                continue
            nxt = max(row, key=row.get)
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, prefix + sym))
    return None


def _mc_records(model, encoded, runs: int, rng) -> list[me.PredictionRecord]:
    records = []
    for tokens, label in encoded:
        pred = mc_predict(model, np.asarray(tokens, dtype=np.int64), runs, rng)
        probs = pred.mean
        guess = int(np.argmax(probs))
        conf = float(probs[guess])
        records.append(me.PredictionRecord(
            y_true=int(label), y_pred=guess, confidence=conf,
            run_max_probs=pred.run_probs.max(axis=1).tolist(),
            logits=np.log(np.maximum(probs, 1e-300)),
        ))
    return records


def cmd_eval_calibration(cfg: dict, args) -> int:
    out = args.out
    _prepare_out(out)
    alphabet = _alphabet(cfg)
    model = StateModel.load(_require(args.model, "model checkpoint"))
    dataset = _load_tsv(args.data)
    encoded = _encode_for(model, dataset, alphabet)
    rng = stream_rng(cfg["seed"], "eval")
    records = _mc_records(model, encoded, args.runs, rng)
    report = me.bin_and_score(records, bins=args.bins)
    me.reliability_csv(report, os.path.join(out, "reliability.csv"))
    me.records_save(records, os.path.join(out, "records.csv"))
    summary = {"pe": report.pe, "ece": report.ece, "mce": report.mce,
               "count": len(records), "runs": args.runs, "bins": args.bins}
    if args.fit_temperature:
        temp = me.fit_posthoc_temperature(records)
        rescaled = me.bin_and_score(me.apply_temperature(records, temp),
                                    bins=args.bins)
        summary["temperature"] = temp
        summary["ece_after_scaling"] = rescaled.ece
    with open(os.path.join(out, "calibration.json"), "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    write_manifest(out, "eval-calibration", cfg,
                   {"model": args.model, "data": args.data})
    print(f"PE {report.pe:.2f}%  ECE {report.ece:.2f}%  MCE {report.mce:.2f}%")
    return EXIT_OK


def cmd_eval_ood(cfg: dict, args) -> int:
    out = args.out
    _prepare_out(out)
    alphabet = _alphabet(cfg)
    model = StateModel.load(_require(args.model, "model checkpoint"))
    in_set = _encode_for(model, _load_tsv(args.data), alphabet)
    out_set = [tokens for tokens, _lab in
               _encode_for(model, _load_tsv(args.ood_data), alphabet)]
    n = min(len(in_set), len(out_set))
    rng = stream_rng(cfg["seed"], "eval")
    reports = me.ood_scores(model, in_set[:n], out_set[:n],
                            runs=args.runs, rng=rng)
    payload = {kind: {"auroc": r.auroc, "aupr": r.aupr} for kind, r in reports.items()}
    with open(os.path.join(out, "ood.json"), "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    write_manifest(out, "eval-ood", cfg,
                   {"model": args.model, "in": args.data, "ood": args.ood_data})
    for kind, r in reports.items():
        print(f"{kind}: AUROC {r.auroc:.4f}  AUPR {r.aupr:.4f}")
    return EXIT_OK


def cmd_predict_uncertainty(cfg: dict, args) -> int:
    out = args.out
    _prepare_out(out)
    alphabet = _alphabet(cfg)
    model = StateModel.load(_require(args.model, "model checkpoint"))
    if args.seq is not None:
        sequences = [args.seq]
    elif args.data is not None:
        sequences = [item.symbols for item in _load_tsv(args.data)]
    else:
        raise CliError("predict-uncertainty needs --data or --seq")
    index = {ch: i for i, ch in enumerate(alphabet)}
    start = model.cfg.vocab_size == len(alphabet) + 1
    rng = stream_rng(cfg["seed"], "eval")
    reports = []
    for s in sequences:
        tokens = ([len(alphabet)] if start else []) + [index[ch] for ch in s]
        if args.runs:
            rep = un.mc_decompose(model, tokens, args.runs, rng)
        else:
            try:
                rep = un.decompose(un.enumerate_paths(model, tokens))
            except un.PathExplosion as err:
                raise CliError(f"{err}; rerun with --runs") from err
        reports.append((s, rep))
    un.write_reports_json(os.path.join(out, "uncertainty.json"), reports)
    un.write_reports_csv(os.path.join(out, "uncertainty.csv"), reports)
    write_manifest(out, "predict-uncertainty", cfg,
                   {"model": args.model} if args.seq else
                   {"model": args.model, "data": args.data})
    for s, rep in reports[:10]:
        print(f"{s!r}: total {rep.total:.4f}  aleatoric {rep.aleatoric:.4f}  "
              f"epistemic {rep.epistemic:.4f} bits [{rep.mode}]")
    if len(reports) > 10:
        print(f"... {len(reports) - 10} more in {out}/uncertainty.csv")
    if args.check:
        bad = [(s, rep.epistemic) for s, rep in reports if rep.epistemic < -1e-9]
        if bad:
            print(f"check failed: negative epistemic estimates: {bad[:3]}")
            return EXIT_CHECK
        print("check passed: epistemic >= 0 within tolerance")
    return EXIT_OK


def cmd_rl_train(cfg: dict, args) -> int:
    out = args.out
    _prepare_out(out)
    rl = cfg.get("rl", {})
    agent_cfg = AgentConfig(
        kind=rl.get("kind", "sttau"),
        observe=rl.get("observe", "mdp"),
        policy=rl.get("policy", "sampling"),
        hidden_dim=rl.get("hidden_dim", 100),
        learning_rate=rl.get("learning_rate", 0.002),
        discount=rl.get("discount", 0.99),
        episodes=rl.get("episodes", 2000),
        seed=cfg["seed"],
        tau_init=rl.get("tau_init", 1.0),
        stop_at=rl.get("stop_at"),
    )
    try:
        agent, curve = train_agent(agent_cfg)
    except TrainingDiverged as err:
        raise CliError(f"policy training diverged: {err}") from err
    agent.save(os.path.join(out, "agent.bin"))
    write_curve_csv(os.path.join(out, "curve.csv"), curve, agent_cfg.seed)
    final = curve[-1]["moving_average"]
    greedy = evaluate_agent(agent, replace(agent_cfg, policy="greedy"), 20,
                            stream_rng(cfg["seed"], "eval"))
    summary = {"episodes_run": len(curve), "final_moving_average": final,
               "greedy_mean_reward": greedy}
    with open(os.path.join(out, "rl.json"), "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    write_manifest(out, "rl-train", cfg)
    print(f"{len(curve)} episodes; final moving average {final:.2f}; "
          f"greedy eval {greedy:.2f}")
    return EXIT_OK


def cmd_ablate_tau(cfg: dict, args) -> int:
    """Train small in/out-of-distribution models across k and τ modes."""
    out = args.out
    _prepare_out(out)
    state_counts = [int(x) for x in args.states.split(",")]
    data = cfg["data"]
    rng = stream_rng(cfg["seed"], "data")
    full = au.generate_tomita_dataset(data["max_len"], data["n"], rng)
    train_raw, valid_raw = au.split_dataset(full, data["valid_fraction"], rng)
    shifted = au.generate_shifted_dataset(len(valid_raw), data["ood_min_len"],
                                          data["ood_max_len"], data["ood_p_one"],
                                          rng)
    alphabet = _alphabet(cfg)
    rows = []
    for k in state_counts:
        for learn in (True, False):
            mc = dict(cfg["model"])
            mc.update(state_count=k, learn_tau=learn,
                      tau_init=args.fixed_tau if not learn else mc.get("tau_init", 1.0))
            model = StateModel(_model_config({"model": mc}))
            enc_train = _encode_for(model, train_raw, alphabet)
            enc_valid = _encode_for(model, valid_raw, alphabet)
            enc_ood = [tokens for tokens, _lab in
                       _encode_for(model, shifted, alphabet)]
            settings = TrainSettings(updates=cfg["train"]["updates"],
                                     validate_every=cfg["train"]["validate_every"])
            train(model, enc_train, enc_valid, settings, seed=cfg["seed"])
            n = min(len(enc_valid), len(enc_ood))
            reports = me.ood_scores(model, enc_valid[:n], enc_ood[:n],
                                    runs=args.runs,
                                    rng=stream_rng(cfg["seed"], "eval"))
            for kind, r in reports.items():
                rows.append({"state_count": k,
                             "tau_mode": "learned" if learn else f"fixed={args.fixed_tau}",
                             "score": kind, "auroc": r.auroc, "aupr": r.aupr})
            print(f"k={k} learn_tau={learn}: "
                  + "  ".join(f"{r['score']} auroc={r['auroc']:.3f} aupr={r['aupr']:.3f}"
                              for r in rows[-2:]))
    import csv as _csv
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as f:
        writer = _csv.DictWriter(f, fieldnames=["state_count", "tau_mode",
                                                "score", "auroc", "aupr"])
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, "ablate-tau", cfg)
    print(f"wrote {len(rows)} rows to {out}/ablation.csv")
    return EXIT_OK


# ----------------------------------------------------------------------
# argument wiring


def _add_common(p: argparse.ArgumentParser, task_default: str) -> None:
    p.add_argument("--config", help="JSON config; fields overlay the defaults")
    p.add_argument("--task", choices=TASKS, default=task_default)
    p.add_argument("--out", required=True, help="run directory (created if missing)")
    p.add_argument("--seed", type=int)
    # model overrides
    p.add_argument("--cell", choices=("gru", "lstm"))
    p.add_argument("--states-k", dest="state_count", type=int,
                   help="number of learnable states k")
    p.add_argument("--hidden", dest="hidden_dim", type=int)
    p.add_argument("--embed", dest="embed_dim", type=int)
    p.add_argument("--estimator", choices=("soft", "st"))
    p.add_argument("--tau-init", dest="tau_init", type=float)
    p.add_argument("--no-learn-tau", dest="learn_tau", action="store_false",
                   default=None)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch", dest="batch_size", type=int)
    # training overrides
    p.add_argument("--updates", type=int)
    p.add_argument("--validate-every", dest="validate_every", type=int)
    # data overrides
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--flip-prob", dest="flip_prob", type=float)
    p.add_argument("--benchmark", choices=("sl1", "sl2"))


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "model.cell": getattr(args, "cell", None),
        "model.state_count": getattr(args, "state_count", None),
        "model.hidden_dim": getattr(args, "hidden_dim", None),
        "model.embed_dim": getattr(args, "embed_dim", None),
        "model.estimator": getattr(args, "estimator", None),
        "model.tau_init": getattr(args, "tau_init", None),
        "model.learn_tau": getattr(args, "learn_tau", None),
        "model.learning_rate": getattr(args, "learning_rate", None),
        "model.batch_size": getattr(args, "batch_size", None),
        "train.updates": getattr(args, "updates", None),
        "train.validate_every": getattr(args, "validate_every", None),
        "data.max_len": getattr(args, "max_len", None),
        "data.n": getattr(args, "n", None),
        "data.flip_prob": getattr(args, "flip_prob", None),
        "data.benchmark": getattr(args, "benchmark", None),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="statewalk",
                     description="Stochastic finite-state sequence models: "
                                 "training, automaton extraction, uncertainty, "
                                 "calibration, OOD, and cartpole RL.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save a dataset")
    _add_common(p, "tomita")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model (or ensemble) on a task")
    _add_common(p, "tomita")
    p.add_argument("--data-dir", help="use TSVs from gen-data instead of regenerating")
    p.add_argument("--ensemble", dest="ensemble_members", type=int,
                   help="train this many members instead of a single model")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("extract-dfa", help="extract an annotated DFA from a checkpoint")
    _add_common(p, "tomita")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="TSV of sequences to replay")
    p.add_argument("--check", action="store_true",
                   help="verify language equivalence against the reference grammar")
    p.add_argument("--check-max-len", type=int, default=14)
    p.set_defaults(fn=cmd_extract_dfa)

    p = sub.add_parser("extract-pa", help="extract and merge a probabilistic automaton")
    _add_common(p, "pa")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--merge-tol", dest="merge_tol", type=float, default=0.1)
    p.add_argument("--check", action="store_true",
                   help="compare accept masses against the benchmark automaton")
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(fn=cmd_extract_pa)

    p = sub.add_parser("eval-calibration", help="reliability bins, ECE/MCE, temperature fit")
    _add_common(p, "synthetic-classify")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--runs", type=int, default=10, help="stochastic passes per sequence")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--fit-temperature", action="store_true")
    p.set_defaults(fn=cmd_eval_calibration)

    p = sub.add_parser("eval-ood", help="MP / Var-MP OOD scores with AUROC and AUPR")
    _add_common(p, "ood")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="in-distribution TSV")
    p.add_argument("--ood-data", dest="ood_data", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.set_defaults(fn=cmd_eval_ood)

    p = sub.add_parser("predict-uncertainty",
                       help="exact or MC entropy decomposition per sequence")
    _add_common(p, "tomita")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="TSV of sequences")
    p.add_argument("--seq", help="single symbol string instead of --data")
    p.add_argument("--runs", type=int, default=0,
                   help="MC runs; 0 = exact enumeration")
    p.add_argument("--check", action="store_true",
                   help="fail if any epistemic estimate is negative")
    p.set_defaults(fn=cmd_predict_uncertainty)

    p = sub.add_parser("rl-train", help="REINFORCE on cartpole")
    _add_common(p, "rl")
    p.add_argument("--kind", choices=("sttau", "vanilla"), dest="rl_kind")
    p.add_argument("--observe", choices=("mdp", "pomdp"), dest="rl_observe")
    p.add_argument("--policy", choices=("sampling", "greedy"), dest="rl_policy")
    p.add_argument("--episodes", type=int, dest="rl_episodes")
    p.add_argument("--stop-at", type=float, dest="rl_stop_at",
                   help="stop once the moving average reaches this reward")
    p.set_defaults(fn=cmd_rl_train)

    p = sub.add_parser("ablate-tau",
                       help="OOD scores across state counts and τ modes")
    _add_common(p, "ood")
    p.add_argument("--states", default="2,10",
                   help="comma-separated k values")
    p.add_argument("--fixed-tau", dest="fixed_tau", type=float, default=1.0)
    p.add_argument("--runs", type=int, default=10)
    p.set_defaults(fn=cmd_ablate_tau)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = _overrides(args)
    if args.command == "rl-train":
        for name in ("kind", "observe", "policy", "episodes", "stop_at"):
            value = getattr(args, f"rl_{name}", None)
            if value is not None:
                overrides[f"rl.{name}"] = value
    if getattr(args, "ensemble_members", None):
        overrides["train.ensemble_members"] = args.ensemble_members
    try:
        cfg = load_config(args.task, args.config, overrides)
        return args.fn(cfg, args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        if getattr(args, "out", None):
            _mark_failed(args.out, str(err))
        return EXIT_RUNTIME
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        if getattr(args, "out", None):
            _mark_failed(args.out, f"{type(err).__name__}: {err}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
