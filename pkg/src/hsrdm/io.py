"""Persistence: dataset directories, model checkpoints, experiment configs.

Dataset format: a directory holding ``meta.json`` (human-readable
structure) and raw little-endian float64 blobs, so any language can
parse it and round-trips are exact.  Checkpoints pair a JSON manifest
naming every parameter block with one binary blob of float64 arrays.
Experiment configs are a single JSON file with nested sections; unknown
keys are errors.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import emissions as em
from . import transitions as tr
from .datasets import FigureEightConfig, MarchingBandConfig
from .errors import ConfigError
from .inference import CaviConfig
from .model import InitParams, LatentTrajectories, ModelParams, TimeSeriesDataset

DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(path, data, latents=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "n_timesteps": int(data.n_timesteps),
        "n_entities": int(data.n_entities),
        "obs_dim": int(data.obs_dim),
        "example_end_times": [int(t) for t in data.example_end_times],
        "system_covariate_dim": 0 if data.system_covariates is None else int(data.system_covariates.shape[1]),
        "entity_covariate_dim": 0 if data.entity_covariates is None else int(data.entity_covariates.shape[2]),
        "has_latents": latents is not None,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    _write_f64(path / "observations.bin", data.observations)
    if data.system_covariates is not None:
        _write_f64(path / "system_covariates.bin", data.system_covariates)
    if data.entity_covariates is not None:
        _write_f64(path / "entity_covariates.bin", data.entity_covariates)
    if latents is not None:
        blob = np.concatenate([
            latents.system_states.reshape(-1),
            latents.entity_states.reshape(-1),
        ]).astype("<i8")
        (path / "latents.bin").write_bytes(blob.tobytes())
    return path


def load_dataset(path, with_latents=False):
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    T, J, D = meta["n_timesteps"], meta["n_entities"], meta["obs_dim"]
    obs = _read_f64(path / "observations.bin", (T, J, D))
    sys_cov = ent_cov = None
    if meta.get("system_covariate_dim", 0):
        sys_cov = _read_f64(path / "system_covariates.bin", (T, meta["system_covariate_dim"]))
    if meta.get("entity_covariate_dim", 0):
        ent_cov = _read_f64(path / "entity_covariates.bin", (T, J, meta["entity_covariate_dim"]))
    data = TimeSeriesDataset(
        observations=obs,
        example_end_times=np.asarray(meta["example_end_times"], dtype=np.int64),
        system_covariates=sys_cov,
        entity_covariates=ent_cov,
    )
    if not with_latents:
        return data
    if not meta.get("has_latents", False):
        return data, None
    raw = np.frombuffer((path / "latents.bin").read_bytes(), dtype="<i8")
    latents = LatentTrajectories(
        system_states=raw[:T].copy(),
        entity_states=raw[T:].reshape(T, J).copy(),
    )
    return data, latents


def _write_f64(path, array):
    Path(path).write_bytes(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_f64(path, shape):
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    return raw.reshape(shape).copy()


# ---------------------------------------------------------------------------
# checkpoints


def _recurrence_to_json(spec):
    params = {}
    for key, value in spec.params.items():
        if callable(value):
            raise ValueError("custom recurrence functions are not serializable")
        params[key] = value.tolist() if isinstance(value, np.ndarray) else value
    return {"kind": spec.kind, "params": params, "covariate_dim": spec.covariate_dim}


def _recurrence_from_json(obj):
    return tr.RecurrenceSpec(kind=obj["kind"], params=dict(obj.get("params", {})),
                             covariate_dim=obj.get("covariate_dim", 0))


def _param_arrays(params):
    """Named float64 blocks covering every model parameter."""
    J, K = params.n_entities, params.n_entity_states
    blocks = {
        "system_log_tpm": params.theta_system.log_tpm,
        "system_recurrence_weights": params.theta_system.recurrence_weights,
        "entity_log_tpms": params.theta_entity.log_tpms,
        "entity_recurrence_weights": params.theta_entity.recurrence_weights,
        "pi_system": params.theta_init.pi_system,
        "pi_entity": params.theta_init.pi_entity,
    }
    if params.emission_family == em.GAUSSIAN_VAR:
        D = params.theta_emission[0][0].dim
        blocks["emission_A"] = np.stack([[params.theta_emission[j][k].A for k in range(K)] for j in range(J)])
        blocks["emission_b"] = np.stack([[params.theta_emission[j][k].b for k in range(K)] for j in range(J)])
        blocks["emission_Q"] = np.stack([[params.theta_emission[j][k].Q for k in range(K)] for j in range(J)])
        blocks["init_mean"] = np.stack(
            [[params.theta_init.initial_emissions[j][k].mean for k in range(K)] for j in range(J)])
        blocks["init_cov"] = np.stack(
            [[params.theta_init.initial_emissions[j][k].cov for k in range(K)] for j in range(J)])
    else:
        blocks["emission_a"] = np.array(
            [[params.theta_emission[j][k].a for k in range(K)] for j in range(J)])
        blocks["emission_drift"] = np.array(
            [[params.theta_emission[j][k].drift for k in range(K)] for j in range(J)])
        blocks["emission_concentration"] = np.array(
            [[params.theta_emission[j][k].concentration for k in range(K)] for j in range(J)])
        blocks["init_mean"] = np.array(
            [[params.theta_init.initial_emissions[j][k].mean for k in range(K)] for j in range(J)])
        blocks["init_concentration"] = np.array(
            [[params.theta_init.initial_emissions[j][k].concentration for k in range(K)] for j in range(J)])
    return blocks


def save_checkpoint(path, params):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blocks = _param_arrays(params)
    manifest_blocks = []
    offset = 0
    chunks = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest_blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "emission_family": params.emission_family,
        "n_system_states": int(params.n_system_states),
        "n_entity_states": int(params.n_entity_states),
        "n_entities": int(params.n_entities),
        "system_recurrence": _recurrence_to_json(params.system_recurrence),
        "entity_recurrence": _recurrence_to_json(params.entity_recurrence),
        "blocks": manifest_blocks,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (path / "params.bin").write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest['format_version']}")
    raw = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
    blocks = {}
    for entry in manifest["blocks"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = raw[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).copy()
        blocks[entry["name"]] = arr
    family = manifest["emission_family"]
    J, K = manifest["n_entities"], manifest["n_entity_states"]
    if family == em.GAUSSIAN_VAR:
        theta_emission = [[em.GaussianVarParams(A=blocks["emission_A"][j, k],
                                                b=blocks["emission_b"][j, k],
                                                Q=blocks["emission_Q"][j, k])
                           for k in range(K)] for j in range(J)]
        init_emissions = [[em.GaussianInitParams(mean=blocks["init_mean"][j, k],
                                                 cov=blocks["init_cov"][j, k])
                           for k in range(K)] for j in range(J)]
    else:
        theta_emission = [[em.VonMisesArParams(a=float(blocks["emission_a"][j, k]),
                                               drift=float(blocks["emission_drift"][j, k]),
                                               concentration=float(blocks["emission_concentration"][j, k]))
                           for k in range(K)] for j in range(J)]
        init_emissions = [[em.VonMisesInitParams(mean=float(blocks["init_mean"][j, k]),
                                                 concentration=float(blocks["init_concentration"][j, k]))
                           for k in range(K)] for j in range(J)]
    return ModelParams(
        theta_system=tr.SystemTransitionParams(
            log_tpm=blocks["system_log_tpm"],
            recurrence_weights=blocks["system_recurrence_weights"]),
        theta_entity=tr.EntityTransitionParams(
            log_tpms=blocks["entity_log_tpms"],
            recurrence_weights=blocks["entity_recurrence_weights"]),
        theta_emission=theta_emission,
        theta_init=InitParams(pi_system=blocks["pi_system"], pi_entity=blocks["pi_entity"],
                              initial_emissions=init_emissions),
        system_recurrence=_recurrence_from_json(manifest["system_recurrence"]),
        entity_recurrence=_recurrence_from_json(manifest["entity_recurrence"]),
        emission_family=family,
    )


# ---------------------------------------------------------------------------
# experiment configs


@dataclass
class ExperimentConfig:
    """Validated experiment description (model, inference, data, forecast)."""

    n_system_states: int
    n_entity_states: int
    emission_family: str = em.GAUSSIAN_VAR
    system_recurrence: tr.RecurrenceSpec = field(default_factory=tr.zero_recurrence)
    entity_recurrence: tr.RecurrenceSpec = field(default_factory=tr.zero_recurrence)
    inference: CaviConfig = field(default_factory=CaviConfig)
    data: dict = field(default_factory=dict)
    forecast: dict = field(default_factory=dict)
    output_dir: str = "."
    seed: int = 0

    def to_json(self):
        return {
            "model": {
                "n_system_states": self.n_system_states,
                "n_entity_states": self.n_entity_states,
                "emission_family": self.emission_family,
                "system_recurrence": _recurrence_to_json(self.system_recurrence),
                "entity_recurrence": _recurrence_to_json(self.entity_recurrence),
            },
            "inference": asdict(self.inference),
            "data": self.data,
            "forecast": self.forecast,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


_TOP_KEYS = {"model", "inference", "data", "forecast", "output_dir", "seed"}
_MODEL_KEYS = {"n_system_states", "n_entity_states", "emission_family",
               "system_recurrence", "entity_recurrence"}
_DATA_KEYS = {"path", "generator", "generator_config"}
_FORECAST_KEYS = {"target_entities", "horizon", "n_samples", "seed"}
_GENERATORS = {"figure-eight": FigureEightConfig, "marching-band": MarchingBandConfig}


def load_config(path):
    """Parse and validate an experiment config; every violation is
    collected and reported together."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from exc
    return config_from_dict(raw)


def config_from_dict(raw):
    violations = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be an object"])
    for key in raw:
        if key not in _TOP_KEYS:
            violations.append(f"unknown top-level key {key!r}")
    model = raw.get("model", {})
    for key in model:
        if key not in _MODEL_KEYS:
            violations.append(f"unknown model key {key!r}")
    L = model.get("n_system_states")
    K = model.get("n_entity_states")
    if not isinstance(L, int) or L < 1:
        violations.append("model.n_system_states must be an integer >= 1")
    if not isinstance(K, int) or K < 1:
        violations.append("model.n_entity_states must be an integer >= 1")
    family = model.get("emission_family", em.GAUSSIAN_VAR)
    if family not in (em.GAUSSIAN_VAR, em.VON_MISES_AR):
        violations.append(f"unknown emission family {family!r}")

    def parse_spec(obj, label):
        if obj is None:
            return tr.zero_recurrence()
        try:
            return _recurrence_from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            violations.append(f"{label}: {exc}")
            return tr.zero_recurrence()

    sys_spec = parse_spec(model.get("system_recurrence"), "model.system_recurrence")
    ent_spec = parse_spec(model.get("entity_recurrence"), "model.entity_recurrence")
    if ent_spec.kind in ("oob_count", "elapsed_since_predicate"):
        violations.append(f"entity recurrence cannot use system-level kind {ent_spec.kind!r}")

    inference_raw = raw.get("inference", {})
    cavi_fields = {f for f in CaviConfig.__dataclass_fields__}
    for key in inference_raw:
        if key not in cavi_fields:
            violations.append(f"unknown inference key {key!r}")
    try:
        inference = CaviConfig(**{k: v for k, v in inference_raw.items() if k in cavi_fields})
    except (TypeError, ValueError) as exc:
        violations.append(f"inference: {exc}")
        inference = CaviConfig()

    data = raw.get("data", {})
    for key in data:
        if key not in _DATA_KEYS:
            violations.append(f"unknown data key {key!r}")
    if "generator" in data and data["generator"] not in _GENERATORS:
        violations.append(f"unknown generator {data['generator']!r}")
    if "path" in data and not Path(data["path"]).exists():
        violations.append(f"data.path does not exist: {data['path']}")
    if "generator_config" in data:
        gen = data.get("generator")
        if gen in _GENERATORS:
            try:
                _GENERATORS[gen](**data["generator_config"])
            except (TypeError, ValueError) as exc:
                violations.append(f"data.generator_config: {exc}")

    forecast = raw.get("forecast", {})
    for key in forecast:
        if key not in _FORECAST_KEYS:
            violations.append(f"unknown forecast key {key!r}")

    if violations:
        raise ConfigError(violations)
    return ExperimentConfig(
        n_system_states=L,
        n_entity_states=K,
        emission_family=family,
        system_recurrence=sys_spec,
        entity_recurrence=ent_spec,
        inference=inference,
        data=dict(data),
        forecast=dict(forecast),
        output_dir=raw.get("output_dir", "."),
        seed=raw.get("seed", 0),
    )


def save_config(path, config):
    Path(path).write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
    return Path(path)
