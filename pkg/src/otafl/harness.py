"""Experiment orchestration: configuration, multi-seed training runs over
shared channel randomness, metrics files, and summary reports.

Every cell (scheme x seed) replays the same deployment, the same data
partition, the same initial model, and bit-identical fading and noise
streams, so per-round differences between schemes are attributable to
power control alone.  Outputs are newline-delimited JSON records plus CSV
summaries; given a config, every output byte is deterministic.
"""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, bounds, channel, learner, link, rng, sca

SCHEME_NAMES = ("ideal_fedavg", "sca", "opc_ota", "vanilla_ota", "lcpc",
                "bb_fl_interior", "bb_fl_alternative")
SURROGATE_SCHEMES = ("opc_ota", "lcpc")
METRIC_NAMES = ("test_accuracy", "global_loss", "grad_norm_sq")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


def default_config() -> dict:
    """Defaults mirror the reference wireless setup at desk scale; the
    stepsize ships pre-selected by the grid-eta subcommand (see README)."""
    return {
        "n_devices": 10,
        "r_max_m": 1750.0,
        "pathloss": {"exponent": 2.2, "pl0_db": 50.0},
        "bandwidth_hz": 1.0e6,
        "noise_psd_dbm_hz": -173.0,
        "ptx_dbm": 0.0,
        "g_max": 10.0,
        "eta": 0.1,
        "t_rounds": 200,
        "batch_size": None,
        "seeds": list(range(20)),
        "schemes": list(SCHEME_NAMES),
        "deployment_seed": 17,
        "data_seed": 11,
        "init_seed": 3,
        "dataset": {"kind": "synthetic", "n_classes": 10, "feature_dim": 20,
                    "per_class": 250, "mean_scale": 1.3, "test_fraction": 0.2,
                    "labels_per_device": 2, "path": None},
        "model": {"hidden": [32], "reg": 0.01},
        "sca": {"max_iters": 100, "rel_tol": 1e-6, "kappa": "estimate", "smooth_l": None},
        "bb": {"r_in_fraction": 0.6},
        "report": {"target_accuracy": 0.8},
    }


def merge_config(overrides: dict = None) -> dict:
    cfg = default_config()
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise ConfigError(f"unknown config key: {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            for sub, sub_value in value.items():
                if sub not in cfg[key]:
                    raise ConfigError(f"unknown config key: {key}.{sub}")
                cfg[key][sub] = sub_value
        else:
            cfg[key] = value
    return cfg


def validate_config(cfg: dict) -> dict:
    """Schema and sanity checks; returns the config on success."""
    merged = merge_config(cfg)
    positive = ["n_devices", "r_max_m", "bandwidth_hz", "g_max", "eta", "t_rounds"]
    for key in positive:
        if not merged[key] or merged[key] <= 0:
            raise ConfigError(f"{key} must be positive, got {merged[key]}")
    if merged["pathloss"]["exponent"] < 0 or merged["pathloss"]["pl0_db"] < 0:
        raise ConfigError("path loss parameters must be nonnegative")
    if merged["ptx_dbm"] is None or merged["noise_psd_dbm_hz"] is None:
        raise ConfigError("transmit power and noise PSD are required")
    if not merged["seeds"]:
        raise ConfigError("need at least one seed")
    if any(int(s) < 0 for s in merged["seeds"]):
        raise ConfigError("seeds must be nonnegative integers")
    for scheme in merged["schemes"]:
        if scheme not in SCHEME_NAMES:
            raise ConfigError(f"unknown scheme {scheme!r}; valid: {', '.join(SCHEME_NAMES)}")
    ds = merged["dataset"]
    if ds["kind"] not in ("synthetic", "file"):
        raise ConfigError("dataset.kind must be 'synthetic' or 'file'")
    if ds["kind"] == "file" and not ds["path"]:
        raise ConfigError("dataset.kind='file' requires dataset.path")
    if not 0 < ds["test_fraction"] < 1:
        raise ConfigError("dataset.test_fraction must be in (0, 1)")
    if merged["batch_size"] is not None and merged["batch_size"] < 1:
        raise ConfigError("batch_size must be None (full batch) or >= 1")
    bb = merged["bb"]
    if not 0 < bb["r_in_fraction"] <= 1:
        raise ConfigError("bb.r_in_fraction must be in (0, 1]")
    kappa = merged["sca"]["kappa"]
    if not (kappa in ("estimate", "worst_case") or isinstance(kappa, (int, float))):
        raise ConfigError("sca.kappa must be 'estimate', 'worst_case', or a number")
    return merged


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}")
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class World:
    """Everything shared across cells: fixed deployment, data, model init,
    and the statistical-CSI designs.  Immutable during runs."""

    config: dict
    cfg_hash: str
    deployment: channel.Deployment
    gains: channel.LargeScaleGains
    net: channel.NetworkConfig
    spec: learner.ObjectiveSpec
    datasets: list
    test_x: np.ndarray
    test_y: np.ndarray
    manifest: dict
    w0: np.ndarray
    kappa: float
    eta: float
    smooth_l: float
    r_in: float
    designs: dict = field(default_factory=dict)
    design_meta: dict = field(default_factory=dict)


def _load_dataset(cfg: dict):
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        return learner.make_gaussian_mixture(ds["n_classes"], ds["feature_dim"],
                                             ds["per_class"], ds["mean_scale"],
                                             seed=cfg["data_seed"])
    return learner.load_feature_label_file(ds["path"])


def build_world(cfg: dict) -> World:
    cfg = validate_config(cfg)
    deployment = channel.sample_deployment(cfg["n_devices"], cfg["r_max_m"],
                                           seed=cfg["deployment_seed"])
    gains = channel.pathloss_gains(deployment, cfg["pathloss"]["exponent"],
                                   cfg["pathloss"]["pl0_db"])

    x, y = _load_dataset(cfg)
    (train_x, train_y), (test_x, test_y) = learner.split_train_test(
        x, y, cfg["dataset"]["test_fraction"], seed=cfg["data_seed"])
    assignments, label_map = learner.partition_noniid(
        train_y, cfg["n_devices"], cfg["dataset"]["labels_per_device"],
        seed=cfg["data_seed"])
    datasets = learner.build_local_datasets(train_x, train_y, assignments)
    manifest = {str(m): [int(i) for i in idx] for m, idx in enumerate(assignments)}

    spec = learner.ObjectiveSpec(input_dim=train_x.shape[1],
                                 hidden=tuple(cfg["model"]["hidden"]),
                                 n_classes=int(np.max(y)) + 1,
                                 reg=cfg["model"]["reg"])
    net = channel.NetworkConfig(
        lam=gains.lam,
        e_s=channel.energy_per_sample(cfg["ptx_dbm"], cfg["bandwidth_hz"]),
        n0=channel.noise_variance_per_dim(cfg["noise_psd_dbm_hz"]),
        d=spec.dim, g_max=cfg["g_max"])

    w0 = learner.init_params(spec, seed=cfg["init_seed"])
    kappa_cfg = cfg["sca"]["kappa"]
    if kappa_cfg == "estimate":
        kappa = learner.estimate_kappa(spec, w0, datasets, cfg["g_max"])
    elif kappa_cfg == "worst_case":
        kappa = 2.0 * cfg["g_max"]
    else:
        kappa = float(kappa_cfg)
    eta = cfg["eta"]
    smooth_l = cfg["sca"]["smooth_l"] if cfg["sca"]["smooth_l"] else 1.0 / eta

    world = World(config=cfg, cfg_hash=config_hash(cfg), deployment=deployment,
                  gains=gains, net=net, spec=spec, datasets=datasets,
                  test_x=test_x, test_y=test_y, manifest=manifest, w0=w0,
                  kappa=kappa, eta=eta, smooth_l=smooth_l,
                  r_in=cfg["bb"]["r_in_fraction"] * cfg["r_max_m"])
    for scheme in cfg["schemes"]:
        _prepare_design(world, scheme)
    return world


def design_problem(world: World) -> sca.DesignProblem:
    return sca.DesignProblem(lam=world.net.lam, g_max=world.net.g_max, d=world.net.d,
                             e_s=world.net.e_s, n0=world.net.n0, eta=world.eta,
                             smooth_l=world.smooth_l, kappa=world.kappa,
                             sigma=np.zeros(world.net.n_devices))


def _prepare_design(world: World, scheme: str):
    if scheme in world.designs:
        return
    if scheme == "sca":
        problem = design_problem(world)
        design, state, certificate = sca.sca_loop(
            problem, max_iters=world.config["sca"]["max_iters"],
            rel_tol=world.config["sca"]["rel_tol"])
        report = bounds.full_report(design, problem.sigma, world.net, world.kappa,
                                    world.eta, world.smooth_l)
        world.designs[scheme] = design
        world.design_meta[scheme] = {
            "surrogate": False,
            "gamma": design.gamma.tolist(),
            "p": design.p.tolist(),
            "alpha": design.alpha,
            "objective_trace": [float(v) for v in state.objective_trace],
            "iterations": state.iteration,
            "converged": state.converged,
            "certificate": {
                "coupling_residual": certificate.coupling_residual.tolist(),
                "simplex_residual": certificate.simplex_residual,
                "box_violations": certificate.box_violations,
                "accepted": certificate.accepted,
            },
            "bound": report.to_dict(),
        }
    elif scheme == "lcpc":
        design = baselines.lcpc(world.net.lam, world.net)
        report = bounds.full_report(design, 0.0, world.net, world.kappa,
                                    world.eta, world.smooth_l)
        world.designs[scheme] = design
        world.design_meta[scheme] = {
            "surrogate": True,
            "gamma": design.gamma.tolist(),
            "p": design.p.tolist(),
            "alpha": design.alpha,
            "bound": report.to_dict(),
        }
    elif scheme == "opc_ota":
        world.design_meta[scheme] = {"surrogate": True}


def _channel_checksum(h: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(h).tobytes()).hexdigest()[:12]


def _local_losses_and_grads(world: World, w: np.ndarray):
    """One full-batch pass per device: per-device losses, clipped gradients."""
    losses = np.empty(len(world.datasets))
    grads = np.empty((len(world.datasets), world.spec.dim))
    for m, ds in enumerate(world.datasets):
        losses[m], grad = learner.loss_and_grad(world.spec, w, ds.x, ds.y)
        grads[m] = learner.clip_to_norm(grad, world.net.g_max)
    return losses, grads


def _transmit_grads(world: World, w: np.ndarray, full_grads: np.ndarray,
                    seed: int, round_index: int) -> np.ndarray:
    batch = world.config["batch_size"]
    if batch is None:
        return full_grads
    out = np.empty_like(full_grads)
    for m, ds in enumerate(world.datasets):
        gen = rng.stream(seed, device=m, round_index=round_index, purpose=rng.MINIBATCH)
        out[m] = learner.local_gradient(world.spec, w, ds, batch, world.net.g_max, gen)
    return out


def run_cell(world: World, scheme: str, seed: int) -> list:
    """Train one scheme under one seed for T rounds; returns metric records."""
    cfg = world.config
    net = world.net
    noise_model = channel.NoiseModel(n0=net.n0, d=net.d)
    w = world.w0.copy()
    design = world.designs.get(scheme)
    meta = world.design_meta.get(scheme, {})
    records = []
    for t in range(cfg["t_rounds"]):
        fading = channel.sample_fading(world.gains, seed, t)
        losses, full_grads = _local_losses_and_grads(world, w)
        tx_grads = _transmit_grads(world, w, full_grads, seed, t)
        mean_grad = full_grads.mean(axis=0)
        noise_draw = noise_model.draw(rng.stream(seed, round_index=t, purpose=rng.NOISE))

        if scheme == "ideal_fedavg":
            estimate = tx_grads.mean(axis=0)
            active = net.n_devices
        elif scheme in ("sca", "lcpc"):
            result = link.ota_round(tx_grads, design, fading, noise_draw, net)
            estimate = result.g_hat
            active = int(result.active_mask.sum())
        elif scheme == "vanilla_ota":
            decision = baselines.vanilla_ota(fading.h, net)
            estimate = baselines.policy_round(tx_grads, decision, fading.h, noise_draw, net)
            active = int(decision.participation_mask.sum())
        elif scheme == "opc_ota":
            decision = baselines.opc_ota(fading.h, net)
            estimate = baselines.policy_round(tx_grads, decision, fading.h, noise_draw, net)
            active = int(decision.participation_mask.sum())
        elif scheme in ("bb_fl_interior", "bb_fl_alternative"):
            coin = None
            if scheme == "bb_fl_alternative":
                coin = float(rng.stream(seed, round_index=t, purpose=rng.COIN).random())
            mask, gamma, post = baselines.bb_fl(scheme.removeprefix("bb_fl_"), t,
                                                world.deployment, net, world.r_in, coin)
            chi = link.active_mask(fading.h, gamma, net)
            weights = mask * chi * gamma
            estimate = (weights @ tx_grads + noise_draw) / post
            active = int((mask * chi).sum())
        else:
            raise ConfigError(f"unknown scheme {scheme!r}")

        bound = meta.get("bound")
        zeta_components = None
        if bound is not None:
            zeta_components = {key: bound[key] for key in
                               ("transmission_variance", "minibatch_variance",
                                "receiver_noise", "zeta")}
        records.append({
            "scheme": scheme,
            "seed": int(seed),
            "round": t,
            "test_accuracy": learner.accuracy(world.spec, w, world.test_x, world.test_y),
            "global_loss": float(losses.mean()),
            "grad_norm_sq": float(mean_grad @ mean_grad),
            "active_count": active,
            "zeta_components": zeta_components,
            "bias_term": bound["bias_term"] if bound else None,
            "channel_checksum": _channel_checksum(fading.h),
            "config_hash": world.cfg_hash,
        })
        w = learner.sgd_step(w, estimate, world.eta)
    return records


def run_experiment(cfg: dict, out_dir, threads: int = 1) -> Path:
    """Run every scheme x seed cell and write metrics plus run metadata.

    The output directory must not already contain metrics (records are
    append-only; reruns go to fresh directories).  One failed cell is
    recorded under errors in run_meta.json without aborting the others.
    """
    world = build_world(cfg)
    cfg = world.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.ndjson"
    if metrics_path.exists():
        raise RuntimeError(f"{metrics_path} already exists; outputs are append-only")

    cells = [(scheme, int(seed)) for scheme in cfg["schemes"] for seed in cfg["seeds"]]
    results = {}
    errors = []

    def _run(cell):
        scheme, seed = cell
        return cell, run_cell(world, scheme, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for cell, records in pool.map(lambda c: _safe_run(_run, c, errors), cells):
                if records is not None:
                    results[cell] = records
    else:
        for cell in cells:
            cell, records = _safe_run(_run, cell, errors)
            if records is not None:
                results[cell] = records

    with open(metrics_path, "a") as fh:
        for cell in cells:
            for record in results.get(cell, []):
                fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    meta = {
        "config": cfg,
        "config_hash": world.cfg_hash,
        "deployment": {"positions": world.deployment.positions.tolist(),
                       "distances": world.deployment.distances().tolist(),
                       "seed": cfg["deployment_seed"]},
        "lam": world.gains.lam.tolist(),
        "kappa": world.kappa,
        "eta": world.eta,
        "smooth_l": world.smooth_l,
        "d": world.spec.dim,
        "designs": world.design_meta,
        "errors": sorted(errors, key=lambda e: (e["scheme"], e["seed"])),
    }
    with open(out / "run_meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    with open(out / "partition_manifest.json", "w") as fh:
        json.dump(world.manifest, fh, sort_keys=True)
    return metrics_path


def _safe_run(fn, cell, errors):
    try:
        return fn(cell)
    except Exception as err:  # cell isolation: record and move on
        errors.append({"scheme": cell[0], "seed": cell[1], "error": str(err)})
        return cell, None


def design_prescalers(cfg: dict, out_path) -> Path:
    """Run the SCA pipeline alone and write design + certificate + trace."""
    cfg = validate_config(cfg)
    if "sca" not in cfg["schemes"]:
        cfg["schemes"] = list(cfg["schemes"]) + ["sca"]
    world = build_world(cfg)
    payload = {
        "config_hash": world.cfg_hash,
        "problem": {
            "lam": world.gains.lam.tolist(),
            "g_max": world.net.g_max,
            "d": world.net.d,
            "e_s": world.net.e_s,
            "n0": world.net.n0,
            "eta": world.eta,
            "smooth_l": world.smooth_l,
            "kappa": world.kappa,
            "sigma": [0.0] * world.net.n_devices,
        },
        "design": world.design_meta["sca"],
    }
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    return out


def read_metrics(paths) -> list:
    records = []
    for path in paths:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
    if not records:
        raise ConfigError("no metric records found")
    hashes = {r["config_hash"] for r in records}
    if len(hashes) > 1:
        raise ConfigError(f"metrics files come from different configs: {sorted(hashes)}")
    return records


def report(metrics_paths, out_dir, target_accuracy: float = None) -> dict:
    """Aggregate metrics into per-scheme CSV series and a rounds-to-target
    table; returns the summary structure."""
    records = read_metrics(metrics_paths)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schemes = sorted({r["scheme"] for r in records},
                     key=lambda s: SCHEME_NAMES.index(s) if s in SCHEME_NAMES else 99)
    summary = {}
    for metric in METRIC_NAMES:
        rows = []
        for scheme in schemes:
            per_round = {}
            for r in records:
                if r["scheme"] == scheme:
                    per_round.setdefault(r["round"], []).append(r[metric])
            for rnd in sorted(per_round):
                vals = np.asarray(per_round[rnd], dtype=float)
                rows.append((scheme, rnd, float(vals.mean()), float(vals.std())))
        summary[metric] = rows
        with open(out / f"summary_{metric}.csv", "w") as fh:
            fh.write("scheme,round,mean,std\n")
            for scheme, rnd, mean, std in rows:
                fh.write(f"{scheme},{rnd},{mean!r},{std!r}\n")

    if target_accuracy is None:
        target_accuracy = default_config()["report"]["target_accuracy"]
    target_rows = []
    for scheme in schemes:
        series = [(rnd, mean) for s, rnd, mean, _ in summary["test_accuracy"] if s == scheme]
        hit = next((rnd for rnd, mean in series if mean >= target_accuracy), -1)
        target_rows.append((scheme, hit))
    with open(out / "rounds_to_target.csv", "w") as fh:
        fh.write(f"scheme,rounds_to_accuracy_{target_accuracy}\n")
        for scheme, hit in target_rows:
            fh.write(f"{scheme},{hit}\n")
    summary["rounds_to_target"] = target_rows
    return summary


def grid_eta(cfg: dict, etas, t_rounds: int = 60, seeds=None, out_path=None) -> dict:
    """Grid search for the shared constant stepsize: for each candidate,
    run a shortened version of the experiment and score the mean final
    global loss across schemes and seeds (lower is better)."""
    cfg = validate_config(cfg)
    etas = [float(e) for e in etas]
    if not etas:
        raise ConfigError("eta grid must be non-empty")
    seeds = list(seeds) if seeds is not None else cfg["seeds"][:3]
    scores = {}
    for eta in etas:
        trial = deepcopy(cfg)
        trial["eta"] = eta
        trial["t_rounds"] = t_rounds
        trial["seeds"] = seeds
        world = build_world(trial)
        finals = []
        for scheme in trial["schemes"]:
            for seed in seeds:
                records = run_cell(world, scheme, seed)
                finals.append(records[-1]["global_loss"])
        scores[eta] = float(np.mean(finals))
    best = min(scores, key=lambda e: (scores[e], e))
    result = {"etas": etas, "scores": {repr(e): scores[e] for e in etas}, "best_eta": best,
              "t_rounds": t_rounds, "seeds": seeds}
    if out_path is not None:
        with open(out_path, "w") as fh:
            json.dump(result, fh, sort_keys=True, indent=1)
    return result
