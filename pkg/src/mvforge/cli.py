"""Experiment harness: staged pipeline from dataset to report.

Seven subcommands (gen-data, train-encoder, calibrate, attack, evaluate,
coverage, report) each read a JSON config, consume the manifests of
earlier stages, and write their artifacts plus a manifest into a stage
directory under the configured output root. Every stage is
deterministic: re-running with the same config reproduces every
artifact bit for bit. Wall-clock timings are the one exception and are
quarantined in an uninventoried timings.json sidecar per stage.

Exit codes: 0 success, 1 config error, 2 precondition failure (missing
upstream stage, occupied output directory), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (
    AttackConfig,
    NesConfig,
    blackbox_optimize,
    default_playback_kernels,
    whitebox_optimize,
)
from .audio import Waveform, load_wav, save_wav
from .coverage import (
    impersonation_matrix,
    select_complementary,
    select_independent,
    select_random,
    selection_curve,
)
from .encoder import (
    EncoderHandle,
    STOCK_ARCHS,
    blackbox_score,
    embed_waveform,
    load_encoder,
    make_encoder,
    save_encoder,
    train_encoder,
)
from .verification import (
    Gallery,
    Policy,
    ScoreSet,
    eer,
    impersonation_rate,
    menagerie,
    roc,
    spearman,
    threshold_at_far,
)
from .voicegen import (
    CloneModel,
    PopulationSpec,
    generate_population,
    get_speaker_embedding,
)

STAGES = ("dataset", "encoders", "calibration", "attacks", "evaluation",
          "coverage", "report")


class ConfigError(ValueError):
    """Bad or inconsistent configuration: exit code 1."""


class PreconditionError(RuntimeError):
    """Missing upstream stage or occupied output: exit code 2."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated snapshot of one experiment's JSON config."""

    output_dir: Path
    population_opt: PopulationSpec
    population_test: PopulationSpec
    seed_voices_per_gender: int
    seed_voices_seed: int
    encoders: tuple          # of dicts: arch_id, epochs, lr, train_seed
    policies: tuple          # of dicts: rho, n
    target_far: float
    attack: dict             # domain -> AttackConfig kwargs
    nes: dict                # domain -> NesConfig/step settings
    coverage: dict           # attempts, bootstrap_reps, subset_fraction, seed
    genders: tuple
    normalize_avg: bool
    raw: dict = field(repr=False, default_factory=dict)


_DEFAULT_ATTACK = {
    "waveform": {"step_size": 0.001, "epochs": 20, "batch_size": 16,
                 "norm_mode": "l2", "seed": 7},
    "spectrogram": {"step_size": 0.01, "epochs": 20, "batch_size": 16,
                    "norm_mode": "l2", "seed": 7},
    "clone": {"step_size": 0.1, "epochs": 10, "batch_size": 128, "seed": 7},
}
_DEFAULT_NES = {
    "waveform": {"samples": 100, "sigma": 0.001, "step_size": 0.01,
                 "epochs": 10},
    "spectrogram": {"samples": 100, "sigma": 0.001, "step_size": 0.01,
                    "epochs": 10},
    "clone": {"samples": 50, "sigma": 0.025, "step_size": 0.1, "epochs": 10},
}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc)


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        pop = doc.get("population", {})
        spec_kwargs = {
            "num_speakers": int(pop.get("num_speakers", 200)),
            "utterances_per_speaker": int(pop.get("utterances_per_speaker", 10)),
            "gender_balance": float(pop.get("gender_balance", 0.5)),
            "jitter": float(pop.get("jitter", 0.03)),
        }
        seed_opt = int(pop.get("seed_optimization", 11))
        seed_test = int(pop.get("seed_test", 22))
        if seed_opt == seed_test:
            raise ConfigError("optimization and test populations must use "
                              "different seeds")
        seeds = doc.get("seed_voices", {})
        encoders = tuple(
            {"arch_id": e["arch_id"], "epochs": int(e.get("epochs", 60)),
             "lr": float(e.get("lr", 0.15)),
             "train_seed": int(e.get("train_seed", 5))}
            for e in doc.get("encoders", [{"arch_id": "spec-a"}]))
        for e in encoders:
            if e["arch_id"] not in STOCK_ARCHS:
                raise ConfigError(f"unknown encoder arch {e['arch_id']!r}")
        policies = tuple(
            {"rho": p["rho"], "n": int(p["n"])}
            for p in doc.get("policies", [{"rho": "any", "n": 10},
                                          {"rho": "avg", "n": 10}]))
        for p in policies:
            if p["rho"] not in ("any", "avg"):
                raise ConfigError(f"unknown policy rho {p['rho']!r}")
            if p["n"] > spec_kwargs["utterances_per_speaker"]:
                raise ConfigError("policy n exceeds utterances per speaker")
        attack = dict(_DEFAULT_ATTACK)
        attack.update(doc.get("attack", {}))
        nes = dict(_DEFAULT_NES)
        nes.update(doc.get("nes", {}))
        cov = {"attempts": 5, "bootstrap_reps": 100, "subset_fraction": 0.75,
               "seed": 77}
        cov.update(doc.get("coverage", {}))
        if not 0.0 < float(cov["subset_fraction"]) <= 1.0:
            raise ConfigError("coverage subset_fraction must lie in (0, 1]")
        genders = tuple(doc.get("genders", ["a", "b"]))
        if not set(genders) <= {"a", "b"}:
            raise ConfigError("genders must be a subset of ['a', 'b']")
        return ExperimentConfig(
            output_dir=Path(doc.get("output_dir", "mvforge-out")),
            population_opt=PopulationSpec(seed=seed_opt, **spec_kwargs),
            population_test=PopulationSpec(seed=seed_test, **spec_kwargs),
            seed_voices_per_gender=int(seeds.get("per_gender", 10)),
            seed_voices_seed=int(seeds.get("seed", 33)),
            encoders=encoders,
            policies=policies,
            target_far=float(doc.get("calibration", {}).get("target_far", 0.01)),
            attack=attack,
            nes=nes,
            coverage=cov,
            genders=genders,
            normalize_avg=bool(doc.get("normalize_avg", False)),
            raw=doc,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config: {exc}") from exc


# ---------------------------------------------------------------------------
# Manifests and artifact plumbing


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    """Full-precision decimal text for a scalar, numpy or native."""
    return repr(float(x))


def _prepare_stage_dir(cfg: ExperimentConfig, stage: str, force: bool) -> Path:
    stage_dir = cfg.output_dir / stage
    if stage_dir.exists() and any(stage_dir.iterdir()) and not force:
        raise PreconditionError(
            f"output directory {stage_dir} is not empty (use --force)")
    stage_dir.mkdir(parents=True, exist_ok=True)
    for old in stage_dir.rglob("*"):
        if old.is_file():
            old.unlink()
    return stage_dir


def _finish_stage(cfg: ExperimentConfig, stage: str, stage_dir: Path,
                  seeds: dict, timings: dict) -> dict:
    """Write the stage manifest: config snapshot, seeds, artifact checksums.

    Timings land in a separate, uninventoried sidecar so the manifest
    and every listed artifact stay bit-identical across re-runs.
    """
    inventory = {}
    for p in sorted(stage_dir.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "timings.json"):
            inventory[str(p.relative_to(stage_dir))] = _sha256(p)
    manifest = {
        "format": "mvforge-manifest-v1",
        "stage": stage,
        "tool_version": __version__,
        "config": cfg.raw,
        "seeds": seeds,
        "inventory": inventory,
        "timings_file": "timings.json",
    }
    _write_json(stage_dir / "manifest.json", manifest)
    _write_json(stage_dir / "timings.json", timings)
    return manifest


def _read_manifest(cfg: ExperimentConfig, stage: str) -> dict:
    path = cfg.output_dir / stage / "manifest.json"
    if not path.is_file():
        raise PreconditionError(
            f"stage '{stage}' has not been run (missing {path})")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _seed_voice_spec(cfg: ExperimentConfig) -> PopulationSpec:
    return PopulationSpec(num_speakers=2 * cfg.seed_voices_per_gender,
                          utterances_per_speaker=1,
                          seed=cfg.seed_voices_seed,
                          jitter=cfg.population_opt.jitter)


def _populations(cfg: ExperimentConfig):
    return (generate_population(cfg.population_opt),
            generate_population(cfg.population_test),
            generate_population(_seed_voice_spec(cfg)))


def _embed_population(enc, population) -> dict:
    return {sid: np.stack([embed_waveform(enc, w) for w in rec.utterances])
            for sid, rec in population.items()}


def _gallery(embeddings: dict, population: dict, gender: str, n: int,
             population_id: str) -> Gallery:
    gal = Gallery(n=n, population_id=population_id)
    for sid, rec in population.items():
        if gender in ("unknown", rec.gender):
            gal.enroll(sid, embeddings[sid][:n])
    return gal


def _load_encoders(cfg: ExperimentConfig) -> dict:
    _read_manifest(cfg, "encoders")
    out = {}
    for spec in cfg.encoders:
        path = cfg.output_dir / "encoders" / f"{spec['arch_id']}.json"
        if not path.is_file():
            raise PreconditionError(f"missing trained encoder {path}")
        out[spec["arch_id"]] = load_encoder(path)
    return out


def _thresholds(cfg: ExperimentConfig) -> dict:
    _read_manifest(cfg, "calibration")
    path = cfg.output_dir / "calibration" / "thresholds.json"
    if not path.is_file():
        raise PreconditionError(f"missing thresholds file {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _policy_name(p: dict) -> str:
    return f"{p['rho']}-{p['n']}"


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    t0 = time.perf_counter()
    stage_dir = _prepare_stage_dir(cfg, "dataset", args.force)
    pop_opt, pop_test, pop_seed = _populations(cfg)

    def entries(pop, spec):
        rows = []
        for sid, rec in pop.items():
            for k in range(len(rec.utterances)):
                rows.append({"speaker_id": sid, "gender": rec.gender,
                             "utterance": k, "inline_seed": spec.seed})
        return rows

    doc = {}
    for name, pop, spec in (("optimization", pop_opt, cfg.population_opt),
                            ("test", pop_test, cfg.population_test),
                            ("seed_voices", pop_seed, _seed_voice_spec(cfg))):
        doc[name] = {
            "spec": {"num_speakers": spec.num_speakers,
                     "utterances_per_speaker": spec.utterances_per_speaker,
                     "gender_balance": spec.gender_balance,
                     "jitter": spec.jitter, "seed": spec.seed},
            "entries": entries(pop, spec),
        }
    _write_json(stage_dir / "populations.json", doc)
    seeds = {"optimization": cfg.population_opt.seed,
             "test": cfg.population_test.seed,
             "seed_voices": cfg.seed_voices_seed}
    _finish_stage(cfg, "dataset", stage_dir, seeds,
                  {"gen_data_s": time.perf_counter() - t0})
    return 0


# ---------------------------------------------------------------------------
# train-encoder


def cmd_train_encoder(cfg: ExperimentConfig, args) -> int:
    _read_manifest(cfg, "dataset")
    t0 = time.perf_counter()
    stage_dir = _prepare_stage_dir(cfg, "encoders", args.force)
    pop_opt = generate_population(cfg.population_opt)
    timings, seeds = {}, {}
    for spec in cfg.encoders:
        t1 = time.perf_counter()
        enc = make_encoder(spec["arch_id"])
        enc, hist = train_encoder(enc, pop_opt, epochs=spec["epochs"],
                                  lr=spec["lr"],
                                  rng=np.random.default_rng(spec["train_seed"]))
        if not all(np.isfinite(v) for v in hist["loss"]):
            raise FloatingPointError(
                f"training loss diverged for {spec['arch_id']}")
        save_encoder(enc, stage_dir / f"{spec['arch_id']}.json")
        _write_csv(stage_dir / f"{spec['arch_id']}_loss.csv",
                   ["epoch", "loss"],
                   [(i, _fmt(v)) for i, v in enumerate(hist["loss"])])
        _write_json(stage_dir / f"{spec['arch_id']}_history.json",
                    {"train_accuracy": hist["train_accuracy"],
                     "epochs": spec["epochs"], "lr": spec["lr"]})
        seeds[spec["arch_id"]] = spec["train_seed"]
        timings[f"train_{spec['arch_id']}_s"] = time.perf_counter() - t1
    timings["total_s"] = time.perf_counter() - t0
    _finish_stage(cfg, "encoders", stage_dir, seeds, timings)
    return 0


# ---------------------------------------------------------------------------
# calibrate


def _raw_scoreset(embeddings: dict, population: dict) -> ScoreSet:
    """All pairwise utterance cosines, pooled across genders."""
    ids = list(population)
    flat = np.concatenate([embeddings[sid] for sid in ids])
    owner = np.concatenate([np.full(len(embeddings[sid]), i)
                            for i, sid in enumerate(ids)])
    scores = flat @ flat.T
    iu = np.triu_indices(flat.shape[0], 1)
    same = owner[iu[0]] == owner[iu[1]]
    vals = scores[iu]
    return ScoreSet(genuine=vals[same].tolist(),
                    impostor=vals[~same].tolist(), label="raw")


def _policy_scoreset(embeddings: dict, population: dict, policy_spec: dict,
                     normalize_avg: bool) -> ScoreSet:
    """Deployment scores: every utterance probed against every user."""
    from .verification import score as policy_score
    n = policy_spec["n"]
    gal = Gallery(n=n, population_id="calibration")
    for sid in population:
        gal.enroll(sid, embeddings[sid][:n])
    genuine, impostor = [], []
    for sid in population:
        for probe_sid in population:
            for f in embeddings[probe_sid]:
                s = policy_score(f, gal, sid, policy_spec["rho"],
                                 normalize_avg=normalize_avg)
                (genuine if probe_sid == sid else impostor).append(s)
    return ScoreSet(genuine=genuine, impostor=impostor,
                    label=_policy_name(policy_spec))


def _downsample_roc(table: np.ndarray, max_rows: int = 2001) -> np.ndarray:
    if table.shape[0] <= max_rows:
        return table
    idx = np.unique(np.linspace(0, table.shape[0] - 1, max_rows).astype(int))
    return table[idx]


def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    _read_manifest(cfg, "dataset")
    encoders = _load_encoders(cfg)
    t0 = time.perf_counter()
    stage_dir = _prepare_stage_dir(cfg, "calibration", args.force)
    pop_opt = generate_population(cfg.population_opt)
    thresholds, timings = {}, {}
    for arch, enc in encoders.items():
        t1 = time.perf_counter()
        embeddings = _embed_population(enc, pop_opt)
        per_arch = {}
        variants = [("raw", _raw_scoreset(embeddings, pop_opt))]
        for p in cfg.policies:
            variants.append((_policy_name(p),
                             _policy_scoreset(embeddings, pop_opt, p,
                                              cfg.normalize_avg)))
        for name, scores in variants:
            table = roc(scores)
            eer_value, eer_tau = eer(table)
            far1_tau = threshold_at_far(table, cfg.target_far)
            if not (np.isfinite(eer_tau) and np.isfinite(far1_tau)):
                raise FloatingPointError("calibration produced a non-finite "
                                         f"threshold for {arch}/{name}")
            per_arch[name] = {"eer": eer_value, "eer_threshold": eer_tau,
                              "far1_threshold": far1_tau}
            _write_csv(stage_dir / f"roc_{arch}_{name}.csv",
                       ["threshold", "far", "frr"],
                       [tuple(map(_fmt, row))
                        for row in _downsample_roc(table)])
        thresholds[arch] = per_arch
        timings[f"calibrate_{arch}_s"] = time.perf_counter() - t1
    _write_json(stage_dir / "thresholds.json", thresholds)
    timings["total_s"] = time.perf_counter() - t0
    _finish_stage(cfg, "calibration", stage_dir,
                  {"population": cfg.population_opt.seed}, timings)
    return 0


# ---------------------------------------------------------------------------
# attack


def _attack_run_name(domain: str, threat: str, augment: bool) -> str:
    return f"{domain}_{threat}" + ("_aug" if augment else "")


def _clone_seed_embedding(waveform: Waveform, model: CloneModel) -> np.ndarray:
    return np.clip(get_speaker_embedding(waveform, model), 0.0, 1.0)


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    domain, threat, augment = args.domain, args.threat, args.augment
    if domain == "clone" and threat == "white":
        raise ConfigError("the clone synthesizer exposes no analytic "
                          "gradient; use --threat black")
    if domain == "clone" and augment:
        raise ConfigError("playback augmentation is a waveform-domain option")
    _read_manifest(cfg, "dataset")
    encoders = _load_encoders(cfg)
    thresholds = _thresholds(cfg)

    t0 = time.perf_counter()
    run_name = _attack_run_name(domain, threat, augment)
    run_dir = cfg.output_dir / "attacks" / run_name
    if run_dir.exists() and any(run_dir.iterdir()) and not args.force:
        raise PreconditionError(
            f"output directory {run_dir} is not empty (use --force)")
    run_dir.mkdir(parents=True, exist_ok=True)
    for old in run_dir.rglob("*"):
        if old.is_file():
            old.unlink()

    pop_opt = generate_population(cfg.population_opt)
    pop_seed = generate_population(_seed_voice_spec(cfg))
    monitor_n = cfg.policies[0]["n"]
    attack_kwargs = dict(cfg.attack[domain])
    nes_kwargs = dict(cfg.nes[domain])
    nes_lam = nes_kwargs.pop("step_size", attack_kwargs.get("step_size"))
    nes_epochs = nes_kwargs.pop("epochs", attack_kwargs.get("epochs"))
    kernels = default_playback_kernels() if augment else None
    clone_model = CloneModel() if domain == "clone" else None

    timings, ir_rows, run_meta = {}, [], []
    for arch, enc in encoders.items():
        t1 = time.perf_counter()
        arch_dir = run_dir / arch
        arch_dir.mkdir(exist_ok=True)
        embeddings = _embed_population(enc, pop_opt)
        tau_raw = thresholds[arch]["raw"]["far1_threshold"]
        handle = EncoderHandle(enc, "black_box")
        for gender in cfg.genders:
            gallery = _gallery(embeddings, pop_opt, gender, monitor_n,
                               f"opt-{gender}")
            monitor = Policy(rho="any", n=monitor_n, tau=tau_raw)
            seed_ids = [sid for sid, rec in pop_seed.items()
                        if rec.gender == gender]
            for k, sid in enumerate(seed_ids):
                w0 = pop_seed[sid].utterances[0]
                run_cfg = AttackConfig(domain=domain,
                                       playback_augment=augment,
                                       **{**attack_kwargs,
                                          "seed": attack_kwargs.get("seed", 7) + k,
                                          **({"step_size": nes_lam,
                                              "epochs": nes_epochs}
                                             if threat == "black" else {})})
                if threat == "white":
                    mv = whitebox_optimize(w0, gallery, enc, run_cfg,
                                           monitor=monitor, kernels=kernels,
                                           seed_id=sid)
                else:
                    nes = NesConfig(**nes_kwargs)
                    if domain == "clone":
                        seed_sample = _clone_seed_embedding(w0, clone_model)
                    else:
                        seed_sample = w0
                    mv = blackbox_optimize(
                        seed_sample,
                        lambda s, b: blackbox_score(handle, s, b),
                        run_cfg, nes, gallery=gallery, monitor=monitor,
                        monitor_embed=lambda w: embed_waveform(enc, w),
                        kernels=kernels, synth=clone_model, seed_id=sid,
                        seed_waveform=w0,
                        score_batch_fn=handle.score_batch)
                if not np.all(np.isfinite(mv.waveform.samples)):
                    raise FloatingPointError(
                        f"attack produced non-finite audio for seed {sid}")
                save_wav(mv.waveform, arch_dir / f"mv_{gender}_{sid}.wav")
                for ep, (obj, ir) in enumerate(zip(mv.objective_history,
                                                   mv.ir_history)):
                    ir_rows.append((arch, gender, sid, ep, _fmt(obj), _fmt(ir)))
                run_meta.append({
                    "arch": arch, "gender": gender, "seed_id": sid,
                    "domain": domain, "threat": threat, "augment": augment,
                    "attack_seed": run_cfg.seed,
                    "distortion_snr": mv.distortion_snr,
                    "final_objective": mv.objective_history[-1],
                    "monitor_policy": {"rho": "any", "n": monitor_n,
                                       "tau_source": "raw-far1"},
                })
        timings[f"attack_{arch}_s"] = time.perf_counter() - t1
    _write_csv(run_dir / "ir_epoch.csv",
               ["arch", "gender", "seed_id", "epoch", "objective", "ir"],
               ir_rows)
    _write_json(run_dir / "runs.json", run_meta)
    timings["total_s"] = time.perf_counter() - t0
    seeds = {"attack_base": cfg.attack[domain].get("seed", 7),
             "seed_voices": cfg.seed_voices_seed}
    manifest = _finish_stage(cfg, f"attacks/{run_name}", run_dir, seeds, timings)
    # The attacks stage root carries a directory of completed runs.
    root = cfg.output_dir / "attacks"
    runs = sorted(p.name for p in root.iterdir()
                  if p.is_dir() and (p / "manifest.json").is_file())
    _write_json(root / "manifest.json",
                {"format": "mvforge-manifest-v1", "stage": "attacks",
                 "tool_version": __version__, "runs": runs,
                 "inventory": {}, "config": cfg.raw,
                 "seeds": seeds, "timings_file": None})
    return 0 if manifest else 0


def _attack_runs(cfg: ExperimentConfig) -> list:
    root = cfg.output_dir / "attacks"
    if not (root / "manifest.json").is_file():
        raise PreconditionError("no attack runs found (run the attack stage)")
    with open(root / "manifest.json", encoding="utf-8") as fh:
        return json.load(fh)["runs"]


# ---------------------------------------------------------------------------
# evaluate


def _mv_paths(cfg: ExperimentConfig, run: str, arch: str, gender: str) -> list:
    arch_dir = cfg.output_dir / "attacks" / run / arch
    if not arch_dir.is_dir():
        return []
    return sorted(arch_dir.glob(f"mv_{gender}_*.wav"))


def _ir_of_waveforms(paths, enc, gallery, policy) -> float:
    if not paths:
        return float("nan")
    embs = [embed_waveform(enc, load_wav(p)) for p in paths]
    return float(np.mean([impersonation_rate([f], gallery, policy)
                          for f in embs]))


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    _read_manifest(cfg, "dataset")
    encoders = _load_encoders(cfg)
    thresholds = _thresholds(cfg)
    runs = _attack_runs(cfg)
    t0 = time.perf_counter()
    stage_dir = _prepare_stage_dir(cfg, "evaluation", args.force)
    pop_opt, pop_test, pop_seed = _populations(cfg)

    emb = {arch: {"opt": _embed_population(enc, pop_opt),
                  "test": _embed_population(enc, pop_test),
                  "seed": _embed_population(enc, pop_seed)}
           for arch, enc in encoders.items()}
    genders = list(cfg.genders) + ["unknown"]

    ir_rows = []
    for run in runs:
        run_archs = [a for a in encoders
                     if (cfg.output_dir / "attacks" / run / a).is_dir()]
        for arch in run_archs:
            enc = encoders[arch]
            for p in cfg.policies:
                name = _policy_name(p)
                taus = [("raw-far1", thresholds[arch]["raw"]["far1_threshold"]),
                        (f"{name}-far1",
                         thresholds[arch][name]["far1_threshold"])]
                for tau_source, tau in taus:
                    policy = Policy(rho=p["rho"], n=p["n"], tau=tau,
                                    normalize_avg=cfg.normalize_avg)
                    for gender in genders:
                        for pop_name, pop, pop_emb in (
                                ("optimization", pop_opt, emb[arch]["opt"]),
                                ("test", pop_test, emb[arch]["test"])):
                            gal = _gallery(pop_emb, pop, gender, p["n"],
                                           f"{pop_name}-{gender}")
                            sv_ids = [sid for sid, rec in pop_seed.items()
                                      if gender in ("unknown", rec.gender)]
                            sv_ir = float(np.mean(
                                [impersonation_rate(
                                    [emb[arch]["seed"][sid][0]], gal, policy)
                                 for sid in sv_ids]))
                            mv_genders = (cfg.genders if gender == "unknown"
                                          else [gender])
                            paths = [q for g in mv_genders
                                     for q in _mv_paths(cfg, run, arch, g)]
                            mv_ir = _ir_of_waveforms(paths, enc, gal, policy)
                            ir_rows.append((run, arch, gender, pop_name, name,
                                            tau_source, _fmt(tau),
                                            _fmt(sv_ir), _fmt(mv_ir)))
    _write_csv(stage_dir / "ir_table.csv",
               ["run", "arch", "gender", "population", "policy", "tau_source",
                "tau", "sv_ir", "mv_ir"], ir_rows)

    if args.transfer:
        _write_transfer(cfg, stage_dir, encoders, thresholds, runs,
                        pop_test, emb)

    _write_menagerie(cfg, stage_dir, encoders, pop_test, emb)
    timings = {"total_s": time.perf_counter() - t0}
    _finish_stage(cfg, "evaluation", stage_dir,
                  {"populations": [cfg.population_opt.seed,
                                   cfg.population_test.seed]}, timings)
    return 0


def _write_transfer(cfg, stage_dir, encoders, thresholds, runs, pop_test, emb):
    """Cross-encoder IR matrix plus encoder-to-encoder score correlations."""
    p = cfg.policies[0]
    name = _policy_name(p)
    archs = list(encoders)
    rows = []
    for run in runs:
        for mv_arch in archs:
            if not (cfg.output_dir / "attacks" / run / mv_arch).is_dir():
                continue
            for eval_arch in archs:
                enc = encoders[eval_arch]
                tau = thresholds[eval_arch]["raw"]["far1_threshold"]
                policy = Policy(rho=p["rho"], n=p["n"], tau=tau,
                                normalize_avg=cfg.normalize_avg)
                irs = []
                for gender in cfg.genders:
                    gal = _gallery(emb[eval_arch]["test"], pop_test, gender,
                                   p["n"], f"test-{gender}")
                    ir = _ir_of_waveforms(
                        _mv_paths(cfg, run, mv_arch, gender), enc, gal, policy)
                    if not np.isnan(ir):
                        irs.append(ir)
                if irs:
                    rows.append((run, mv_arch, eval_arch, name,
                                 _fmt(np.mean(irs))))
    _write_csv(stage_dir / "transfer_matrix.csv",
               ["run", "mv_arch", "eval_arch", "policy", "mv_ir"], rows)

    # Spearman correlation of per-user mean impostor scores across encoders.
    ids = list(pop_test)
    per_arch = {}
    for arch in archs:
        flat = {sid: emb[arch]["test"][sid].mean(axis=0) for sid in ids}
        vals = []
        for sid in ids:
            others = [flat[o] for o in ids if o != sid]
            vals.append(float(np.mean(flat[sid] @ np.stack(others).T)))
        per_arch[arch] = vals
    rows = []
    for a in archs:
        row = [a]
        for b in archs:
            row.append(_fmt(spearman(per_arch[a], per_arch[b])))
        rows.append(tuple(row))
    _write_csv(stage_dir / "spearman.csv", ["arch"] + archs, rows)


def _write_menagerie(cfg, stage_dir, encoders, pop_test, emb):
    arch = next(iter(encoders))
    n = cfg.policies[0]["n"]
    rows = []
    for gender in cfg.genders:
        gal = _gallery(emb[arch]["test"], pop_test, gender, n,
                       f"test-{gender}")
        probes = {sid: emb[arch]["test"][sid]
                  for sid, rec in pop_test.items() if rec.gender == gender}
        for rec in menagerie(gal, probes):
            rows.append((gender, rec.user_id, _fmt(rec.avg_genuine),
                         _fmt(rec.avg_impostor)))
    _write_csv(stage_dir / "menagerie.csv",
               ["gender", "user_id", "avg_genuine", "avg_impostor"], rows)


# ---------------------------------------------------------------------------
# coverage


def cmd_coverage(cfg: ExperimentConfig, args) -> int:
    _read_manifest(cfg, "dataset")
    encoders = _load_encoders(cfg)
    thresholds = _thresholds(cfg)
    runs = _attack_runs(cfg)
    t0 = time.perf_counter()
    stage_dir = _prepare_stage_dir(cfg, "coverage", args.force)
    run = runs[0] if args.run is None else args.run
    if run not in runs:
        raise PreconditionError(f"attack run {run!r} not found among {runs}")
    arch = next(iter(encoders))
    enc = encoders[arch]
    if not (cfg.output_dir / "attacks" / run / arch).is_dir():
        raise PreconditionError(f"attack run {run!r} has no {arch} artifacts")

    pop_opt, _, pop_seed = _populations(cfg)
    embeddings = _embed_population(enc, pop_opt)
    p = cfg.policies[0]
    tau = thresholds[arch]["raw"]["far1_threshold"]
    policy = Policy(rho=p["rho"], n=p["n"], tau=tau,
                    normalize_avg=cfg.normalize_avg)
    attempts = int(cfg.coverage["attempts"])
    reps = int(cfg.coverage["bootstrap_reps"])
    frac = float(cfg.coverage["subset_fraction"])
    rng = np.random.default_rng(int(cfg.coverage["seed"]))

    rows = []
    for gender in cfg.genders:
        pools = {
            "seed": [(sid, embed_waveform(enc, pop_seed[sid].utterances[0]))
                     for sid, rec in pop_seed.items() if rec.gender == gender],
            "master": [(q.stem, embed_waveform(enc, load_wav(q)))
                       for q in _mv_paths(cfg, run, arch, gender)],
        }
        users = [sid for sid, rec in pop_opt.items() if rec.gender == gender]
        take = max(1, round(frac * len(users)))
        if min(len(v) for v in pools.values()) < attempts:
            raise PreconditionError(
                "candidate pools are smaller than the attempt budget")
        curves = {(pool, strat): np.zeros(attempts)
                  for pool in pools for strat in ("rand", "ind", "comp")}
        for _ in range(reps):
            subset = rng.choice(len(users), size=take, replace=False)
            sub_ids = [users[i] for i in subset]
            gal = Gallery(n=p["n"], population_id=f"boot-{gender}")
            for sid in sub_ids:
                gal.enroll(sid, embeddings[sid][:p["n"]])
            for pool_name, pool in pools.items():
                ids = [c[0] for c in pool]
                cands = [c[1] for c in pool]
                matrix = impersonation_matrix(cands, gal, policy,
                                              candidate_ids=ids)
                selections = {
                    "rand": select_random(matrix, attempts, rng),
                    "ind": select_independent(matrix, attempts),
                    "comp": select_complementary(matrix, attempts),
                }
                for strat, sel in selections.items():
                    chosen = [cands[ids.index(cid)] for cid in sel.chosen]
                    curve = selection_curve(chosen, gal, policy)
                    curves[(pool_name, strat)] += np.asarray(curve)
        for (pool_name, strat), total in curves.items():
            for attempt, value in enumerate(total / reps, start=1):
                rows.append((gender, pool_name, strat, attempt, _fmt(value)))
    _write_csv(stage_dir / "coverage_curves.csv",
               ["gender", "pool", "strategy", "attempt", "ir"], rows)
    _finish_stage(cfg, "coverage", stage_dir,
                  {"bootstrap": int(cfg.coverage["seed"])},
                  {"total_s": time.perf_counter() - t0})
    return 0


# ---------------------------------------------------------------------------
# report


def _plot_csv(csv_path: Path, svg_path: Path) -> None:
    """One SVG per CSV, dispatched on the artifact's column layout."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "mvforge"

    with open(csv_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    name = csv_path.stem
    try:
        if header[:3] == ["threshold", "far", "frr"]:
            t = [float(r[0]) for r in rows]
            ax.plot(t, [float(r[1]) for r in rows], label="FAR")
            ax.plot(t, [float(r[2]) for r in rows], label="FRR")
            ax.set_xlabel("threshold")
            ax.legend()
        elif header == ["epoch", "loss"]:
            ax.plot([int(r[0]) for r in rows], [float(r[1]) for r in rows])
            ax.set_xlabel("epoch")
            ax.set_ylabel("loss")
        elif "avg_genuine" in header:
            gi = header.index("avg_genuine")
            ii = header.index("avg_impostor")
            ax.scatter([float(r[ii]) for r in rows],
                       [float(r[gi]) for r in rows], s=8)
            ax.set_xlabel("avg impostor score")
            ax.set_ylabel("avg genuine score")
        elif "attempt" in header:
            ai = header.index("attempt")
            vi = header.index("ir")
            keys = sorted({tuple(r[:ai]) for r in rows})
            for key in keys:
                pts = [(int(r[ai]), float(r[vi])) for r in rows
                       if tuple(r[:ai]) == key]
                pts.sort()
                ax.plot([x for x, _ in pts], [y for _, y in pts],
                        marker="o", label="/".join(key))
            ax.set_xlabel("attempt")
            ax.set_ylabel("IR")
            ax.legend(fontsize=5)
        elif "epoch" in header and "ir" in header:
            ei = header.index("epoch")
            vi = header.index("ir")
            keys = sorted({tuple(r[:ei]) for r in rows})
            for key in keys:
                pts = [(int(r[ei]), float(r[vi])) for r in rows
                       if tuple(r[:ei]) == key]
                pts.sort()
                ax.plot([x for x, _ in pts], [y for _, y in pts])
            ax.set_xlabel("epoch")
            ax.set_ylabel("IR")
        else:
            # Generic fallback: bar chart of the last numeric column.
            vals = [float(r[-1]) for r in rows if _is_float(r[-1])]
            ax.bar(range(len(vals)), vals)
            ax.set_ylabel(header[-1])
        ax.set_title(name)
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_report(cfg: ExperimentConfig, args) -> int:
    t0 = time.perf_counter()
    stage_dir = _prepare_stage_dir(cfg, "report", args.force)
    stage_dirs = {
        "dataset": cfg.output_dir / "dataset",
        "encoders": cfg.output_dir / "encoders",
        "calibration": cfg.output_dir / "calibration",
        "evaluation": cfg.output_dir / "evaluation",
        "coverage": cfg.output_dir / "coverage",
    }
    attacks_root = cfg.output_dir / "attacks"
    if attacks_root.is_dir():
        for rd in sorted(attacks_root.iterdir()):
            if rd.is_dir():
                stage_dirs[f"attacks_{rd.name}"] = rd

    present, plotted = [], []
    for stage, sdir in stage_dirs.items():
        if not (sdir / "manifest.json").is_file():
            continue
        present.append(stage)
        for csv_path in sorted(sdir.rglob("*.csv")):
            svg_name = f"{stage}_{csv_path.stem}.svg"
            _plot_csv(csv_path, stage_dir / svg_name)
            plotted.append(svg_name)

    summary = {
        "format": "mvforge-summary-v1",
        "tool_version": __version__,
        "stages_present": present,
        "plots": plotted,
        "metrics": _summary_metrics(cfg),
    }
    _write_json(stage_dir / "summary.json", summary)
    _finish_stage(cfg, "report", stage_dir, {},
                  {"total_s": time.perf_counter() - t0})
    return 0


def _summary_metrics(cfg: ExperimentConfig) -> dict:
    metrics = {}
    tpath = cfg.output_dir / "calibration" / "thresholds.json"
    if tpath.is_file():
        with open(tpath, encoding="utf-8") as fh:
            metrics["thresholds"] = json.load(fh)
    ipath = cfg.output_dir / "evaluation" / "ir_table.csv"
    if ipath.is_file():
        with open(ipath, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [r for r in reader if r["population"] == "test"]
        metrics["ir_rows"] = len(rows)
        by_policy = {}
        for r in rows:
            key = f"{r['run']}/{r['arch']}/{r['gender']}/{r['policy']}/{r['tau_source']}"
            by_policy[key] = {"sv_ir": float(r["sv_ir"]),
                              "mv_ir": float(r["mv_ir"])}
        metrics["test_ir"] = by_policy
    return metrics


# ---------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvforge",
                     description="Master-voice attack laboratory pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": cmd_gen_data,
        "train-encoder": cmd_train_encoder,
        "calibrate": cmd_calibrate,
        "attack": cmd_attack,
        "evaluate": cmd_evaluate,
        "coverage": cmd_coverage,
        "report": cmd_report,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--force", action="store_true")
        if name == "attack":
            p.add_argument("--domain", default="waveform",
                           choices=("waveform", "spectrogram", "clone"))
            p.add_argument("--threat", default="white",
                           choices=("white", "black"))
            p.add_argument("--augment", action="store_true")
        if name == "evaluate":
            p.add_argument("--transfer", action="store_true")
        if name == "coverage":
            p.add_argument("--run", default=None)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PreconditionError as exc:
        print(f"precondition failure: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, ZeroDivisionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
