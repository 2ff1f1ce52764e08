"""Command-line surface: simulate, induce, evaluate, make-train-data.

Configuration comes from one YAML file plus flag overrides; the API
credential is read from the SLOTWEAVER_API_KEY environment variable. Exit
codes: 0 success, 1 pipeline error, 2 configuration/auth error.
"""

from __future__ import annotations

import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import click
import yaml

from . import backend as backend_mod
from . import evalx, induct, refine, seqio, sim
from .backend import AuthError, Backend, BackendError
from .seqio import CorpusFile, StateMode, canonical_json

EXIT_OK = 0
EXIT_PIPELINE = 1
EXIT_CONFIG = 2


class ConfigError(click.ClickException):
    """Bad or missing configuration; exits with the config error code."""

    exit_code = EXIT_CONFIG


@dataclass
class RunConfig:
    """Merged view of the config file; every field has its module default."""

    backend: dict = field(default_factory=lambda: {"kind": "scripted", "script": None})
    induction: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    seed: Optional[int] = None
    loss_limit: float = 0.5

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        cfg = cls()
        if path:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            cfg.backend.update(raw.get("backend", {}))
            cfg.induction.update(raw.get("induction", {}))
            cfg.simulation.update(raw.get("simulation", {}))
            if "seed" in raw:
                cfg.seed = raw["seed"]
            if "loss_limit" in raw:
                cfg.loss_limit = raw["loss_limit"]
        return cfg

    def make_backend(self) -> Backend:
        kind = self.backend.get("kind", "scripted")
        if kind == "scripted":
            script = self.backend.get("script")
            if not script:
                raise ConfigError("scripted backend needs backend.script in the config")
            return backend_mod.load_script(script)
        if kind == "http":
            return backend_mod.HttpBackend(
                endpoint=self.backend["endpoint"],
                model=self.backend.get("model", "default"),
                api_key=self.backend.get("api_key"),
                max_retries=self.backend.get("max_retries", 3),
                requests_per_minute=self.backend.get("requests_per_minute"),
            )
        raise ConfigError(f"unknown backend kind: {kind!r}")


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


@click.group()
def main() -> None:
    """Slot schema induction, simulation, and evaluation pipeline."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True, help="Corpus output path.")
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--scenarios", "n_scenarios", type=int, default=None)
@click.option("--dialogues-per-scenario", type=int, default=None)
@click.option("--seed", type=int, default=None)
def simulate(config_path, out_path, report_path, n_scenarios, dialogues_per_scenario, seed):
    """Simulate a state-annotated corpus and write it to disk."""
    cfg = RunConfig.load(config_path)
    seed = seed if seed is not None else cfg.seed
    sim_cfg = sim.SimConfig(
        knowledge_size=cfg.simulation.get("knowledge_size", 8),
        red_herring_count=cfg.simulation.get("red_herrings", 3),
        p_clear=cfg.simulation.get("p_clear", 0.3),
        max_turns=cfg.simulation.get("max_turns", 40),
        temperature=cfg.simulation.get("temperature", 0.7),
    )
    pack = sim.DEFAULT_SIM_PACK
    if cfg.simulation.get("prompt_pack"):
        pack = sim.load_sim_pack(cfg.simulation["prompt_pack"])
    n_scenarios = n_scenarios or cfg.simulation.get("scenarios", 2)
    per_scenario = dialogues_per_scenario or cfg.simulation.get("dialogues_per_scenario", 2)
    try:
        backend = cfg.make_backend()
        scenarios = sim.generate_scenarios(n_scenarios, backend, pack, sim_cfg)
        corpus, report = sim.simulate_corpus(
            scenarios, per_scenario, backend, random.Random(seed), pack, sim_cfg
        )
    except AuthError as exc:
        _fail(str(exc), EXIT_CONFIG)
    except (sim.SimError, BackendError, seqio.CorpusFormatError) as exc:
        _fail(str(exc), EXIT_PIPELINE)
    seqio.save_corpus(corpus, out_path)
    if report_path:
        _write(Path(report_path), canonical_json(report.to_obj()))
    click.echo(
        f"simulated {report.produced}/{report.dialogues_requested} dialogues "
        f"({report.lost} lost) -> {out_path}"
    )
    loss_fraction = report.lost / report.dialogues_requested if report.dialogues_requested else 0.0
    sys.exit(EXIT_OK if loss_fraction < cfg.loss_limit else EXIT_PIPELINE)


def _induction_kwargs(cfg: RunConfig) -> dict:
    ind = cfg.induction
    return {
        "context_budget": ind.get("context_budget", induct.DEFAULT_CONTEXT_BUDGET),
        "hard_cap": ind.get("hard_cap", induct.DEFAULT_HARD_CAP),
        "max_output": ind.get("max_output", 1024),
        "temperature": ind.get("temperature", 0.0),
    }


def _states_jsonl(state_log) -> str:
    return "".join(
        json.dumps(entry.to_obj(), ensure_ascii=False, sort_keys=True) + "\n"
        for entry in state_log
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--mode", type=click.Choice([m.value for m in StateMode]), default=None)
@click.option("--refiner", "refiner_name",
              type=click.Choice(["none", "slot-conf", "fifo", "priority", "revision"]),
              default=None)
@click.option("--window", type=int, default=None, help="Confidence window in dialogues.")
@click.option("--tau", type=int, default=None, help="Confidence threshold in updates.")
@click.option("--cap", type=int, default=None, help="FIFO/priority schema size cap.")
@click.option("--two-pass", is_flag=True, default=False)
@click.option("--replicates", type=int, default=1)
@click.option("--seed", type=int, default=None)
@click.option("--shuffle-seed", "shuffle", is_flag=True, default=False,
              help="Shuffle stream order by the seed.")
def induce(config_path, corpus_path, out_dir, mode, refiner_name, window, tau, cap,
           two_pass, replicates, seed, shuffle):
    """Run streaming induction over a corpus, emitting schema + state log."""
    cfg = RunConfig.load(config_path)
    mode = StateMode(mode or cfg.induction.get("mode", "state"))
    refiner_name = refiner_name if refiner_name is not None else cfg.induction.get("refiner", "none")
    filter_cfg = refine.FilterConfig(
        window_w=window or cfg.induction.get("window", 10),
        threshold_tau=tau or cfg.induction.get("tau", 1),
        cap=cap or cfg.induction.get("cap", 100),
    )
    base_seed = seed if seed is not None else cfg.seed
    out = Path(out_dir)
    kwargs = _induction_kwargs(cfg)
    try:
        corpus = seqio.load_corpus(corpus_path)
    except seqio.CorpusFormatError as exc:
        _fail(str(exc), EXIT_CONFIG)

    index = []
    for rep in range(replicates):
        rep_seed = None
        if shuffle and base_seed is not None:
            rep_seed = base_seed + rep
        rep_dir = out if replicates == 1 else out / f"rep-{rep:03d}"
        try:
            backend = cfg.make_backend()
            refiner = refine.make_refiner(refiner_name, filter_cfg, backend)
            if two_pass:
                schema, result = induct.run_two_pass(
                    corpus, mode, refiner, backend, seed=rep_seed, **kwargs
                )
            else:
                result = induct.run_induction(
                    corpus, mode, refiner, backend, seed=rep_seed, **kwargs
                )
                schema = result.final_schema
        except AuthError as exc:
            _fail(str(exc), EXIT_CONFIG)
        except (BackendError, induct.SchemaOverflowError) as exc:
            _fail(str(exc), EXIT_PIPELINE)
        report = result.to_obj()
        report["final_schema"] = seqio.schema_to_obj(schema)
        report["two_pass"] = two_pass
        report["mode"] = mode.value
        report["refiner"] = {"name": refiner_name, "params": refiner.params() if refiner else {}}
        _write(rep_dir / "schema.json", canonical_json(seqio.schema_to_obj(schema)))
        _write(rep_dir / "states.jsonl", _states_jsonl(result.state_log))
        _write(rep_dir / "report.json", canonical_json(report))
        index.append(str(rep_dir))
        click.echo(
            f"[{rep_dir}] {len(schema)} slots, {result.turns_processed} turns, "
            f"{result.parse_failures} parse failures"
        )
    if replicates > 1:
        _write(out / "index.json", canonical_json({"replicates": index}))
    sys.exit(EXIT_OK)


def _load_state_log(path: Path):
    """Read a state log from a report.json or a states.jsonl file."""
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        entries = [json.loads(line) for line in text.splitlines() if line.strip()]
    else:
        entries = json.loads(text)["states"]
    return [
        (e["dialogue_id"], e["turn"], seqio.state_from_obj(e["state"]))
        for e in entries
    ]


@main.command()
@click.option("--predictions", type=click.Path(exists=True), required=True,
              help="Run report.json or states.jsonl from induce.")
@click.option("--gold", "gold_path", type=click.Path(exists=True), required=True)
@click.option("--mode", type=click.Choice([m.value for m in StateMode]), default="state")
@click.option("--human-mapping", "human_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
def evaluate(predictions, gold_path, mode, human_path, out_path):
    """Score a run's states against a gold corpus; print the metric table."""
    try:
        gold = seqio.load_corpus(gold_path)
        log = _load_state_log(Path(predictions))
        report = evalx.evaluate_run(log, gold, StateMode(mode))
    except seqio.CorpusFormatError as exc:
        _fail(str(exc), EXIT_CONFIG)
    except (evalx.UnknownScenario, evalx.InvalidGold) as exc:
        _fail(str(exc), EXIT_PIPELINE)
    click.echo(report.render_table())
    if human_path:
        dialogue_ids = {d.id for d in gold.dialogues}
        P = evalx.collect_valued_slots(log)
        G = evalx.gold_valued_slots(gold.dialogues, StateMode(mode))
        auto = evalx.match_slots(P, G)
        try:
            human = evalx.load_human_mapping(human_path)
            agreement = evalx.mapping_agreement(auto, human)
        except evalx.IncompleteMapping as exc:
            _fail(str(exc), EXIT_PIPELINE)
        click.echo(f"mapping agreement with human decisions: {agreement:.3f}")
    if out_path:
        _write(Path(out_path), canonical_json(report.to_obj()))
    sys.exit(EXIT_OK)


@main.command("make-train-data")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--mode", type=click.Choice([m.value for m in StateMode]), default="state")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--revision", is_flag=True, default=False)
@click.option("--noisy-log", "noisy_path", type=click.Path(exists=True), default=None,
              help="Prior run's state log for revision pair construction.")
@click.option("--seed", type=int, default=0)
def make_train_data(corpus_path, mode, out_path, revision, noisy_path, seed):
    """Emit JSON-lines (prompt, target) training pairs."""
    try:
        corpus = seqio.load_corpus(corpus_path)
        if revision:
            if not noisy_path:
                _fail("--revision requires --noisy-log", EXIT_CONFIG)
            noisy = _load_state_log(Path(noisy_path))
            pairs = refine.build_revision_pairs(corpus, noisy, seed)
        else:
            pairs = seqio.build_training_sequences(corpus, StateMode(mode))
    except seqio.CorpusFormatError as exc:
        _fail(str(exc), EXIT_CONFIG)
    except seqio.MissingGoldError as exc:
        _fail(str(exc), EXIT_PIPELINE)
    seqio.save_training_pairs(pairs, out_path)
    click.echo(f"wrote {len(pairs)} pairs -> {out_path}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
