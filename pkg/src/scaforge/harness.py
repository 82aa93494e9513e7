"""Experiment orchestration: configuration, datasets, model caching, the
four evaluation axes, and report emission.

Every experiment is fully determined by (config, seed): all randomness is
derived from those through hashed seed spawning, model checkpoints are
cached by configuration fingerprint, and report rows are formatted with
fixed precision so reruns are byte-identical.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .arch import ModelArch, generate_zoo
from .baselines import (
    SinusoidParams, active_fence_schedule, random_schedule, sinusoid_schedule,
)
from .crafting import fgsm_similarity, quantize, universal_pgd
from .ctc import ler
from .extraction import VARIANT_CONFIGS, AttackModel, train
from .leakage import LeakageParams, PowerSeries, TdcConfig, synthesize_power, tdc_readout
from .nas import ProxyTask, is_feasible, nas_worst, proxy_accuracy
from .noisegen import (
    MAX_LEVEL, N_LEVELS, BoardSession, EnablePattern, NoiseSchedule,
    TransientParams, level_response, pdn_response, ro_power, sensing_config,
)

MIN_DEPTH, MAX_DEPTH = 2, 16


class ConfigError(ValueError):
    """Bad or unknown configuration content (exit code 1 territory)."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs",
    "zoo": {
        "size": 200, "seed": 1, "train": 160, "val": 20, "holdout": 20,
        "traces_per_arch": 3,
    },
    "leakage": {"noise_sigma": 0.2, "ramp_fraction": 0.15,
                "ambient_max": 4.0, "ambient_shift": 3.2},
    "sensor": {"n_taps": 512, "gain": 1024.0, "noise_sigma": 0.25},
    "transient": {"p_set": 0.1, "smoothing": 0.7, "deriv_gain": 0.5},
    "idle_power": 0.5,
    "lead_periods": 16,
    "attack": {
        "epochs": 26, "finetune_epochs": 10, "lr": 2e-3, "batch_size": 8,
        "surrogate_variant": 0, "transfer_variants": [1, 2, 3],
        "transfer_epochs": 10,
    },
    "crafting": {
        "repeats": 3, "pgd_steps": 10, "pgd_epochs": 3,
        "quantize_mode": "linear",
    },
    "sinusoid": {"redraw_interval": 128},
    "fence": {"gain": 4.0},
    "nas": {
        "episodes": 10, "task_seed": 0, "train_samples": 400,
        "val_samples": 200,
    },
    "budgets": [1, 4, 8, 16, 32],
    "couplings": [1.0, 0.6],
    "evaluation": {"archs": 20, "seeds": 3, "utility_budget": 32},
}

SIMILARITY_DEFENSES = ("none", "random", "sinusoid", "fence", "fgsm")
UTILITY_DEFENSES = ("none", "random", "sinusoid", "fence", "pgd")


def _coerce(default, value, path: str):
    if isinstance(default, bool) or isinstance(value, bool):
        if isinstance(default, bool) and isinstance(value, bool):
            return value
    elif isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    elif isinstance(default, int) and isinstance(value, int):
        return value
    elif isinstance(default, str) and isinstance(value, str):
        return value
    elif isinstance(default, list) and isinstance(value, list):
        return copy.deepcopy(value)
    raise ConfigError(f"config key {path!r}: expected "
                      f"{type(default).__name__}, got {type(value).__name__}")


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    unknown = sorted(set(override) - set(base))
    if unknown:
        names = ", ".join(f"{prefix}{k}" for k in unknown)
        raise ConfigError(f"unknown config key(s): {names}")
    out = {}
    for key, default in base.items():
        path = f"{prefix}{key}"
        if key not in override:
            out[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            if not isinstance(override[key], dict):
                raise ConfigError(f"config key {path!r}: expected a section")
            out[key] = _merge(default, override[key], path + ".")
        else:
            out[key] = _coerce(default, override[key], path)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated nested key-value configuration (defaults + overrides)."""

    data: dict

    @staticmethod
    def from_dict(overrides: dict | None) -> "ExperimentConfig":
        return ExperimentConfig(_merge(DEFAULT_CONFIG, overrides or {}))

    @staticmethod
    def load(path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a key-value mapping")
        return ExperimentConfig.from_dict(loaded)

    def __getitem__(self, key: str):
        node = self.data
        for part in key.split("."):
            node = node[part]
        return node

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        data["seed"] = int(seed)
        return ExperimentConfig(data)

    @property
    def checksum(self) -> str:
        blob = json.dumps(self.data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def spawn_seed(*parts) -> int:
    """Deterministic, collision-resistant child seed from labelled parts."""
    blob = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def worker_count() -> int:
    env = os.environ.get("SCAFORGE_THREADS", "")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"SCAFORGE_THREADS must be an integer: {env!r}") \
                from exc
        if n < 1:
            raise ConfigError("SCAFORGE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def parallel_map(fn, items) -> list:
    """Order-preserving map over independent cells, capped by the env var."""
    items = list(items)
    workers = min(worker_count(), max(len(items), 1))
    if workers == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# physical setup shared by every experiment
# ---------------------------------------------------------------------------

@dataclass
class Lab:
    """The simulated board: leakage source, sensor, and RO transients."""

    leakage: LeakageParams
    sensor: TdcConfig
    transient: TransientParams
    idle_power: float = 0.5
    # Background activity from co-tenant logic, present in every victim
    # trace (clean and defended alike) and shaped by the shared PDN
    # transient: each trace draws a constant baseline load uniform in
    # [0, ambient_shift] (the co-tenant's workload intensity for that run)
    # plus an extra uniform [0, ambient_max] draw per readout period.
    ambient_max: float = 4.0
    ambient_shift: float = 3.2
    # Pre-trigger capture: readout periods recorded before inference starts,
    # showing only idle power plus ambient activity (and any injected noise).
    lead_periods: int = 16

    @staticmethod
    def from_config(config: ExperimentConfig) -> "Lab":
        lk = config["leakage"]
        sn = config["sensor"]
        tr = config["transient"]
        return Lab(
            leakage=LeakageParams(noise_sigma=lk["noise_sigma"],
                                  ramp_fraction=lk["ramp_fraction"]),
            sensor=TdcConfig(n_taps=sn["n_taps"], gain=sn["gain"],
                             noise_sigma=sn["noise_sigma"]),
            transient=TransientParams(p_set=tr["p_set"],
                                      smoothing=tr["smoothing"],
                                      deriv_gain=tr["deriv_gain"]),
            idle_power=config["idle_power"],
            ambient_max=lk["ambient_max"],
            ambient_shift=lk["ambient_shift"],
            lead_periods=config["lead_periods"],
        )

    @property
    def params_checksum(self) -> str:
        blob = json.dumps({
            "leakage": {
                "base_amp": {k.value: v for k, v in self.leakage.base_amp.items()},
                "amp_coeff": {k.value: v for k, v in self.leakage.amp_coeff.items()},
                "base_dur": {k.value: v for k, v in self.leakage.base_dur.items()},
                "dur_coeff": {k.value: v for k, v in self.leakage.dur_coeff.items()},
                "ramp_fraction": self.leakage.ramp_fraction,
                "noise_sigma": self.leakage.noise_sigma,
            },
            "sensor": asdict(self.sensor),
            "transient": asdict(self.transient),
            "idle_power": self.idle_power,
            "ambient_max": self.ambient_max,
            "ambient_shift": self.ambient_shift,
            "lead_periods": self.lead_periods,
        }, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def readout_periods(self, arch: ModelArch) -> int:
        samples = sum(self.leakage.segment_duration(l) for l in arch.layers)
        return self.lead_periods + samples // self.sensor.samples_per_readout

    def _power(self, arch: ModelArch, seed: int) -> PowerSeries:
        power = synthesize_power(arch, self.leakage, seed)
        spr = self.sensor.samples_per_readout
        n_sig = len(power) // spr
        lead = np.full(self.lead_periods * spr, self.idle_power)
        samples = np.concatenate([lead, power.samples[:n_sig * spr]])
        n = self.lead_periods + n_sig
        if self.ambient_max > 0 or self.ambient_shift > 0:
            rng = np.random.default_rng(spawn_seed(seed, "ambient"))
            baseline = rng.uniform(0.0, self.ambient_shift)
            per_period = baseline + rng.uniform(0.0, self.ambient_max, size=n)
            drive = np.repeat(per_period, spr)
            # ambient tenants share the PDN, so their draw is shaped by the
            # same transient response as the RO sets
            samples = samples + pdn_response(drive, self.transient)
        return PowerSeries(samples, power.dt)

    def clean_trace(self, arch: ModelArch, seed: int) -> np.ndarray:
        power = self._power(arch, seed)
        return tdc_readout(power, None, self.sensor,
                           spawn_seed(seed, "tdc")).readouts

    def noisy_trace(self, arch: ModelArch, seed: int, levels: np.ndarray,
                    budget: int, eta: float = 1.0) -> np.ndarray:
        """Victim trace with one RO enable level injected per readout."""
        power = self._power(arch, seed)
        spr = self.sensor.samples_per_readout
        n = len(power) // spr
        levels = np.asarray(levels, dtype=np.int64)
        if len(levels) < n:
            raise ValueError(f"schedule covers {len(levels)} of {n} readouts")
        tp = replace(self.transient, coupling=eta) if eta != 1.0 else self.transient
        ro = ro_power(NoiseSchedule(levels[:n]), tp,
                      samples_per_level=spr, max_sets=max(budget, 1))
        return tdc_readout(power, ro, self.sensor,
                           spawn_seed(seed, "tdc")).readouts

    def board(self, eta: float, seed: int, budget: int = 32,
              high_res: bool = False) -> BoardSession:
        cfg = sensing_config(self.sensor) if high_res else self.sensor
        tp = replace(self.transient, coupling=eta)
        return BoardSession(cfg, tp, seed=seed, idle_power=self.idle_power,
                            max_sets=max(budget, 1))


# ---------------------------------------------------------------------------
# noise deployment: measured level responses -> linearized actuation tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeployTable:
    """Logical level (0..320, linear in intended strength) -> pattern level.

    Built from in-situ measurements so the defender's actuation tracks the
    actual (count x duty, coupling) power response instead of the raw
    pattern enumeration, which is not monotone in drawn power.
    """

    table: np.ndarray
    eps_taps: float  # deployment-sensor drop of the strongest pattern

    def apply(self, levels: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(levels, dtype=np.int64)]


def measure_drops(lab: Lab, eta: float, seed: int) -> np.ndarray:
    """Per-pattern readout drop vs the all-off pattern, in deployment taps.

    Measured on the defender's high-resolution sensing configuration and
    rescaled to the deployment sensor's tap size.
    """
    sim = lab.board(eta, seed=spawn_seed(seed, "drops"), high_res=True)
    readings = level_response(sim)
    scale = lab.sensor.gain / sim.cfg.gain
    return np.maximum(readings[0] - readings, 0.0) * scale


def build_deploy_table(drops: np.ndarray, budget: int) -> DeployTable:
    """Restrict to patterns within the set budget and linearize by drop."""
    if not 0 <= budget <= 32:
        raise ValueError(f"budget {budget} outside [0, 32]")
    counts = np.array([EnablePattern(l).count for l in range(N_LEVELS)])
    allowed = np.where(counts <= budget)[0]
    d = drops[allowed]
    targets = np.linspace(0.0, d.max(), N_LEVELS)
    idx = np.abs(d[None, :] - targets[:, None]).argmin(axis=1)
    return DeployTable(allowed[idx], float(d.max()))


# ---------------------------------------------------------------------------
# datasets and model zoo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZooSplit:
    train: list
    val: list
    holdout: list


def split_zoo(config: ExperimentConfig) -> ZooSplit:
    z = config["zoo"]
    if z["train"] + z["val"] + z["holdout"] > z["size"]:
        raise ConfigError("zoo splits exceed zoo size")
    zoo = generate_zoo(z["size"], z["seed"])
    train_end = z["train"]
    val_end = train_end + z["val"]
    return ZooSplit(zoo[:train_end], zoo[train_end:val_end],
                    zoo[val_end:val_end + z["holdout"]])


@dataclass(frozen=True)
class TraceRecord:
    readouts: np.ndarray
    label: np.ndarray
    seed: int
    params_checksum: str


def make_dataset(lab: Lab, archs, repeats: int, tag: str,
                 seed: int) -> list[TraceRecord]:
    checksum = lab.params_checksum

    def one(job):
        i, r, arch = job
        s = spawn_seed(seed, tag, i, r)
        return TraceRecord(lab.clean_trace(arch, s), arch.labels(), s, checksum)

    jobs = [(i, r, arch) for i, arch in enumerate(archs) for r in range(repeats)]
    return parallel_map(one, jobs)


def as_pairs(records) -> list:
    return [(rec.readouts, rec.label) for rec in records]


def save_traces(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "readouts": rec.readouts.tolist(),
                "label": rec.label.tolist(),
                "seed": rec.seed,
                "params_checksum": rec.params_checksum,
            }) + "\n")


def load_traces(path) -> list[TraceRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(TraceRecord(
                np.asarray(obj["readouts"], dtype=np.int64),
                np.asarray(obj["label"], dtype=np.int64),
                int(obj["seed"]), str(obj["params_checksum"])))
    return records


# ---------------------------------------------------------------------------
# model training with on-disk caching
# ---------------------------------------------------------------------------

def cache_dir(config: ExperimentConfig) -> Path:
    path = Path(config["out_dir"]) / "cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _model_key(config: ExperimentConfig, lab: Lab, variant: int, epochs: int,
               finetune: int) -> str:
    relevant = {
        "zoo": config["zoo"], "board": lab.params_checksum,
        "lr": config["attack.lr"], "batch_size": config["attack.batch_size"],
        "variant": variant, "epochs": epochs, "finetune": finetune,
    }
    blob = json.dumps(relevant, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def trained_attacker(config: ExperimentConfig, lab: Lab, variant: int,
                     epochs: int | None = None) -> AttackModel:
    """Train (or load from cache) one attack-model variant on the zoo."""
    if variant not in VARIANT_CONFIGS:
        raise ConfigError(f"unknown attack model variant {variant}")
    finetune = config["attack.finetune_epochs"] if epochs is None else 0
    if epochs is None:
        epochs = config["attack.epochs"]
    key = _model_key(config, lab, variant, epochs, finetune)
    path = cache_dir(config) / f"attacker-{variant}-{key}.npz"
    if path.is_file():
        return AttackModel.from_file(path, VARIANT_CONFIGS[variant])
    zoo = split_zoo(config)
    base = spawn_seed(config["zoo.seed"], "dataset")
    dataset = as_pairs(make_dataset(lab, zoo.train,
                                    config["zoo.traces_per_arch"],
                                    "train", base))
    model = AttackModel(VARIANT_CONFIGS[variant],
                        seed=spawn_seed(base, "init", variant))
    lr = config["attack.lr"]
    train(model, dataset, epochs=epochs,
          seed=spawn_seed(base, "shuffle", variant),
          lr=lr, batch_size=config["attack.batch_size"])
    if finetune > 0:
        # settle the oscillation of the main stage with a reduced step size
        train(model, dataset, epochs=finetune,
              seed=spawn_seed(base, "finetune", variant),
              lr=lr / 4.0, batch_size=config["attack.batch_size"],
              fit_norm=False)
    model.save(path)
    return model


# ---------------------------------------------------------------------------
# report rows
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("experiment", "defense", "budget", "attacker", "eta",
                  "ler_to_label", "ler_to_target", "proxy_acc_extracted",
                  "seed")


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    defense: str
    budget: int
    attacker: int
    eta: float
    ler_to_label: float
    ler_to_target: float | None
    proxy_acc_extracted: float | None
    seed: int

    def format(self) -> str:
        opt = lambda x: "" if x is None else f"{x:.6f}"
        return ",".join((
            self.experiment, self.defense, str(self.budget),
            str(self.attacker), f"{self.eta:.3f}",
            f"{self.ler_to_label:.6f}", opt(self.ler_to_target),
            opt(self.proxy_acc_extracted), str(self.seed)))


def write_report(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write(row.format() + "\n")


def read_report(path) -> list[ReportRow]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(REPORT_COLUMNS):
            raise ValueError(f"unrecognized report header in {path}")
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            opt = lambda s: None if s == "" else float(s)
            rows.append(ReportRow(parts[0], parts[1], int(parts[2]),
                                  int(parts[3]), float(parts[4]),
                                  float(parts[5]), opt(parts[6]),
                                  opt(parts[7]), int(parts[8])))
    return rows


# ---------------------------------------------------------------------------
# experiment runs
# ---------------------------------------------------------------------------

def _schedule_for(defense: str, n: int, dt: DeployTable, seed: int,
                  config: ExperimentConfig,
                  logical: np.ndarray | None = None) -> np.ndarray:
    """Deployed pattern levels for the open-loop defenses."""
    if defense == "none":
        return np.zeros(n, dtype=np.int64)
    if defense == "random":
        req = random_schedule(n, MAX_LEVEL, spawn_seed(seed, "random")).levels
    elif defense == "sinusoid":
        params = SinusoidParams(
            redraw_interval=config["sinusoid.redraw_interval"])
        req = sinusoid_schedule(n, params, spawn_seed(seed, "sinusoid")).levels
    elif defense in ("fgsm", "pgd"):
        if logical is None:
            raise ValueError(f"{defense} requires crafted logical levels")
        req = logical[:n]
    else:
        raise ValueError(f"unknown defense {defense!r}")
    return dt.apply(req)


def _defended_trace(lab: Lab, config: ExperimentConfig, arch: ModelArch,
                    defense: str, dt: DeployTable, budget: int, eta: float,
                    seed: int, logical: np.ndarray | None = None) -> np.ndarray:
    if defense == "fence":
        power = lab._power(arch, seed)
        sim = lab.board(eta, seed=spawn_seed(seed, "fence"), budget=budget)
        idle = sim.measure_level(0)
        sim.reset()
        _, readouts = active_fence_schedule(
            sim, power.samples, gain=config["fence.gain"],
            setpoint=idle - dt.eps_taps, mapping=dt)
        return readouts
    n = lab.readout_periods(arch)
    levels = _schedule_for(defense, n, dt, seed, config, logical)
    return lab.noisy_trace(arch, seed, levels, budget, eta)


def _craft_fgsm(lab: Lab, config: ExperimentConfig, model: AttackModel,
                arch: ModelArch, seed: int) -> np.ndarray:
    """Logical FGSM schedule: push positions to max strength, rest silent."""
    repeats = config["crafting.repeats"]
    traces = [lab.clean_trace(arch, spawn_seed(seed, "craft", r))
              for r in range(repeats)]
    noise = fgsm_similarity(model, traces, arch.labels())
    return np.where(noise.signs == 1, 0, MAX_LEVEL).astype(np.int64)


def run_similarity_experiment(config: ExperimentConfig, eta: float = 1.0,
                              experiment_id: str = "similarity",
                              lab: Lab | None = None,
                              model: AttackModel | None = None,
                              drops: np.ndarray | None = None) -> list[ReportRow]:
    """LER-to-label of each defense across the budget sweep."""
    lab = lab or Lab.from_config(config)
    variant = config["attack.surrogate_variant"]
    model = model or trained_attacker(config, lab, variant)
    seed = config["seed"]
    ev = config["evaluation"]
    archs = split_zoo(config).holdout[:ev["archs"]]
    if not archs:
        raise ConfigError("no held-out architectures to evaluate")
    if drops is None:
        drops = measure_drops(lab, eta, spawn_seed(seed, "cal", eta))
    fgsm_logical = {i: _craft_fgsm(lab, config, model, arch,
                                   spawn_seed(seed, "fgsm", i))
                    for i, arch in enumerate(archs)}
    rows = []
    for budget in config["budgets"]:
        dt = build_deploy_table(drops, budget)
        for defense in SIMILARITY_DEFENSES:

            def cell(job):
                i, r, arch = job
                s = spawn_seed(seed, "eval", eta, i, r)
                trace = _defended_trace(lab, config, arch, defense, dt,
                                        budget, eta, s, fgsm_logical.get(i))
                return ler(model.predict(trace), arch.labels())

            jobs = [(i, r, arch) for i, arch in enumerate(archs)
                    for r in range(ev["seeds"])]
            lers = parallel_map(cell, jobs)
            rows.append(ReportRow(experiment_id, defense, budget, variant,
                                  eta, float(np.mean(lers)), None, None, seed))
    return rows


def _proxy_task(config: ExperimentConfig) -> ProxyTask:
    return ProxyTask.make(config["nas.task_seed"],
                          n_train=config["nas.train_samples"],
                          n_val=config["nas.val_samples"])


def find_decoy(config: ExperimentConfig,
               task: ProxyTask | None = None) -> tuple[ModelArch, float]:
    """Search (or load from cache) the worst-performing feasible arch."""
    task = task or _proxy_task(config)
    key_src = json.dumps({"nas": config["nas"], "seed": config["seed"]},
                         sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:16]
    path = cache_dir(config) / f"decoy-{key}.json"
    if path.is_file():
        obj = json.loads(path.read_text())
        return ModelArch.from_labels(obj["labels"]), float(obj["accuracy"])
    result = None
    for attempt in range(5):
        try:
            result = nas_worst(task, episodes=config["nas.episodes"],
                               seed=spawn_seed(config["seed"], "nas", attempt))
            break
        except RuntimeError:
            continue  # every sampled arch was infeasible; reseed and retry
    if result is None:
        raise RuntimeError("decoy search found no feasible architecture; "
                           "increase nas.episodes")
    path.write_text(json.dumps({
        "labels": result.arch.labels().tolist(),
        "accuracy": result.accuracy,
    }))
    return result.arch, result.accuracy


def pick_victim(config: ExperimentConfig,
                task: ProxyTask | None = None) -> tuple[ModelArch, float]:
    """Highest proxy-accuracy feasible arch among the held-out models."""
    task = task or _proxy_task(config)
    zoo = split_zoo(config)
    seed = spawn_seed(config["zoo.seed"], "victim")
    best = None
    for arch in zoo.holdout + zoo.val + zoo.train:
        if not is_feasible(arch):
            continue
        acc = proxy_accuracy(arch, task, seed=seed)
        if best is None or acc > best[1]:
            best = (arch, acc)
        if acc >= 0.95:
            break
    if best is None:
        # tiny zoos may hold no proxy-feasible arch; protect a canonical one
        from .arch import LayerKind, LayerSpec
        arch = ModelArch((LayerSpec(LayerKind.CONV, 3, 20),
                          LayerSpec(LayerKind.FC, 0, 100),
                          LayerSpec(LayerKind.SOFTMAX)))
        best = (arch, proxy_accuracy(arch, task, seed=seed))
    return best


def _extracted_accuracy(decoded: np.ndarray, task: ProxyTask,
                        seed: int) -> float | None:
    """Proxy accuracy of the decoded arch; None when it cannot be built."""
    if not MIN_DEPTH <= len(decoded) <= MAX_DEPTH:
        return None
    arch = ModelArch.from_labels(decoded)
    if not is_feasible(arch):
        return None
    return proxy_accuracy(arch, task, seed=seed)


def run_utility_experiment(config: ExperimentConfig, eta: float = 1.0,
                           experiment_id: str = "utility",
                           lab: Lab | None = None,
                           model: AttackModel | None = None,
                           attacker: AttackModel | None = None,
                           attacker_id: int | None = None,
                           drops: np.ndarray | None = None) -> list[ReportRow]:
    """Targeted-noise defense vs baselines: LER-to-target and extraction.

    `model` crafts the noise (the defender's surrogate); `attacker` decodes
    (defaults to the surrogate itself).
    """
    lab = lab or Lab.from_config(config)
    variant = config["attack.surrogate_variant"]
    model = model or trained_attacker(config, lab, variant)
    attacker = attacker or model
    attacker_id = variant if attacker_id is None else attacker_id
    seed = config["seed"]
    ev = config["evaluation"]
    budget = ev["utility_budget"]
    if budget < 1:
        raise ConfigError("evaluation.utility_budget must be >= 1")
    task = _proxy_task(config)
    target, target_acc = find_decoy(config, task)
    victim, victim_acc = pick_victim(config, task)
    if drops is None:
        drops = measure_drops(lab, eta, spawn_seed(seed, "cal", eta))
    dt = build_deploy_table(drops, budget)
    craft_traces = [lab.clean_trace(victim, spawn_seed(seed, "ucraft", r))
                    for r in range(config["crafting.repeats"])]
    noise = universal_pgd(model, craft_traces, target.labels(),
                          eps=dt.eps_taps, k=config["crafting.pgd_steps"],
                          epochs=config["crafting.pgd_epochs"])
    pgd_logical = quantize(noise, config["crafting.quantize_mode"]).levels
    acc_seed = spawn_seed(config["zoo.seed"], "victim")
    rows = [
        ReportRow(experiment_id, "victim", budget, attacker_id, eta, 0.0,
                  float(ler(victim.labels(), target.labels())), victim_acc,
                  seed),
        ReportRow(experiment_id, "target", budget, attacker_id, eta,
                  float(ler(target.labels(), victim.labels())), 0.0,
                  target_acc, seed),
    ]
    for defense in UTILITY_DEFENSES:

        def cell(r):
            s = spawn_seed(seed, "ueval", eta, r)
            trace = _defended_trace(lab, config, victim, defense, dt,
                                    budget, eta, s, pgd_logical)
            decoded = attacker.predict(trace)
            return (float(ler(decoded, victim.labels())),
                    float(ler(decoded, target.labels())),
                    _extracted_accuracy(decoded, task, acc_seed))

        results = parallel_map(cell, range(ev["seeds"]))
        accs = [acc for _, _, acc in results if acc is not None]
        rows.append(ReportRow(
            experiment_id, defense, budget, attacker_id, eta,
            float(np.mean([a for a, _, _ in results])),
            float(np.mean([b for _, b, _ in results])),
            float(np.mean(accs)) if accs else None, seed))
    return rows


def run_transferability(config: ExperimentConfig,
                        lab: Lab | None = None) -> list[ReportRow]:
    """Noise crafted against the surrogate, decoded by unseen variants."""
    lab = lab or Lab.from_config(config)
    variant = config["attack.surrogate_variant"]
    surrogate = trained_attacker(config, lab, variant)
    seed = config["seed"]
    ev = config["evaluation"]
    budget = ev["utility_budget"]
    archs = split_zoo(config).holdout[:ev["archs"]]
    drops = measure_drops(lab, 1.0, spawn_seed(seed, "cal", 1.0))
    dt = build_deploy_table(drops, budget)
    fgsm_logical = {i: _craft_fgsm(lab, config, surrogate, arch,
                                   spawn_seed(seed, "fgsm", i))
                    for i, arch in enumerate(archs)}
    rows = []
    for attacker_id in config["attack.transfer_variants"]:
        attacker = trained_attacker(config, lab, attacker_id,
                                    epochs=config["attack.transfer_epochs"])
        for defense in ("none", "fgsm"):

            def cell(job):
                i, r, arch = job
                s = spawn_seed(seed, "eval", 1.0, i, r)
                trace = _defended_trace(lab, config, arch, defense, dt,
                                        budget, 1.0, s, fgsm_logical.get(i))
                return ler(attacker.predict(trace), arch.labels())

            jobs = [(i, r, arch) for i, arch in enumerate(archs)
                    for r in range(ev["seeds"])]
            lers = parallel_map(cell, jobs)
            rows.append(ReportRow("transferability", defense, budget,
                                  attacker_id, 1.0, float(np.mean(lers)),
                                  None, None, seed))
        rows += run_utility_experiment(
            config, experiment_id="transferability", lab=lab,
            model=surrogate, attacker=attacker, attacker_id=attacker_id,
            drops=drops)
    return rows


def run_robustness(config: ExperimentConfig,
                   lab: Lab | None = None) -> list[ReportRow]:
    """Repeat both defenses per coupling, recalibrating in situ each time."""
    couplings = config["couplings"]
    if 1.0 not in couplings or not any(c < 1.0 for c in couplings):
        raise ConfigError("couplings must include 1.0 and a value < 1.0")
    lab = lab or Lab.from_config(config)
    variant = config["attack.surrogate_variant"]
    model = trained_attacker(config, lab, variant)
    seed = config["seed"]
    rows = []
    for eta in couplings:
        drops = measure_drops(lab, eta, spawn_seed(seed, "cal", eta))
        rows += run_similarity_experiment(
            config, eta=eta, experiment_id="robustness-similarity",
            lab=lab, model=model, drops=drops)
        rows += run_utility_experiment(
            config, eta=eta, experiment_id="robustness-utility",
            lab=lab, model=model, drops=drops)
    return rows


EXPERIMENTS = {
    "similarity": run_similarity_experiment,
    "utility": run_utility_experiment,
    "transferability": run_transferability,
    "robustness": run_robustness,
}


def run_experiment(name: str, config: ExperimentConfig) -> list[ReportRow]:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from "
                          f"{', '.join(sorted(EXPERIMENTS))}")
    return EXPERIMENTS[name](config)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def summarize(rows) -> list[dict]:
    """Mean metrics per (experiment, defense, budget, attacker, eta) group."""
    groups: dict[tuple, list[ReportRow]] = {}
    for row in rows:
        key = (row.experiment, row.defense, row.budget, row.attacker, row.eta)
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups):
        members = groups[key]
        mean_opt = lambda vals: (float(np.mean([v for v in vals if v is not None]))
                                 if any(v is not None for v in vals) else None)
        out.append({
            "experiment": key[0], "defense": key[1], "budget": key[2],
            "attacker": key[3], "eta": key[4], "rows": len(members),
            "ler_to_label": float(np.mean([m.ler_to_label for m in members])),
            "ler_to_target": mean_opt([m.ler_to_target for m in members]),
            "proxy_acc_extracted": mean_opt(
                [m.proxy_acc_extracted for m in members]),
        })
    return out


def render_report(report_paths, out_dir) -> Path:
    """Aggregate rows into a summary table, charts, and a static page."""
    rows = []
    for path in report_paths:
        rows += read_report(path)
    if not rows:
        raise ValueError("no report rows to render")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    opt = lambda v: "" if v is None else f"{v:.6f}"
    with open(out / "summary.csv", "w") as fh:
        fh.write("experiment,defense,budget,attacker,eta,rows,"
                 "ler_to_label,ler_to_target,proxy_acc_extracted\n")
        for s in summary:
            fh.write(f"{s['experiment']},{s['defense']},{s['budget']},"
                     f"{s['attacker']},{s['eta']:.3f},{s['rows']},"
                     f"{s['ler_to_label']:.6f},{opt(s['ler_to_target'])},"
                     f"{opt(s['proxy_acc_extracted'])}\n")
    charts = _render_charts(summary, out)
    _render_page(summary, charts, out / "index.html")
    return out / "index.html"


def _render_charts(summary, out: Path) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    charts = []
    experiments = sorted({s["experiment"] for s in summary})
    for exp in experiments:
        rows = [s for s in summary if s["experiment"] == exp]
        budgets = sorted({r["budget"] for r in rows})
        defenses = sorted({r["defense"] for r in rows})
        fig, ax = plt.subplots(figsize=(6, 4))
        if len(budgets) > 1:
            for defense in defenses:
                pts = sorted((r["budget"], r["ler_to_label"]) for r in rows
                             if r["defense"] == defense)
                ax.plot([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", label=defense)
            ax.set_xlabel("budget (max enabled RO sets)")
        else:
            vals = [(d, np.mean([r["ler_to_label"] for r in rows
                                 if r["defense"] == d])) for d in defenses]
            ax.bar([v[0] for v in vals], [v[1] for v in vals])
            ax.tick_params(axis="x", rotation=30)
        ax.set_ylabel("mean LER to label")
        ax.set_title(exp)
        if len(budgets) > 1:
            ax.legend(fontsize=8)
        fig.tight_layout()
        name = f"{exp}.png"
        fig.savefig(out / name, dpi=100)
        plt.close(fig)
        charts.append(name)
    return charts


def _render_page(summary, charts, path: Path) -> None:
    opt = lambda v: "" if v is None else f"{v:.4f}"
    rows_html = "\n".join(
        f"<tr><td>{s['experiment']}</td><td>{s['defense']}</td>"
        f"<td>{s['budget']}</td><td>{s['attacker']}</td>"
        f"<td>{s['eta']:.2f}</td><td>{s['ler_to_label']:.4f}</td>"
        f"<td>{opt(s['ler_to_target'])}</td>"
        f"<td>{opt(s['proxy_acc_extracted'])}</td></tr>"
        for s in summary)
    imgs = "\n".join(f'<img src="{c}" alt="{c}">' for c in charts)
    path.write_text(f"""<!doctype html>
<html><head><meta charset="utf-8"><title>scaforge report</title>
<style>body{{font-family:sans-serif;margin:2em}}table{{border-collapse:collapse}}
td,th{{border:1px solid #999;padding:4px 8px;font-size:13px}}</style></head>
<body><h1>scaforge experiment report</h1>
{imgs}
<table><tr><th>experiment</th><th>defense</th><th>budget</th><th>attacker</th>
<th>eta</th><th>LER to label</th><th>LER to target</th>
<th>extracted proxy acc</th></tr>
{rows_html}</table></body></html>
""")
