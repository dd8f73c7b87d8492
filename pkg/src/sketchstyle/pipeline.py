"""Multi-reference sketch synthesis loop, run configuration and parameter sweeps."""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .attention import FeatureCache, InjectionConfig, InjectionMode, select_layers
from .guidance import GuidanceConfig, combine, omega2_at
from .hooks import InjectionHooks
from .modulation import StyleBlendConfig, joint_adain
from .references import (
    ReferenceBundle,
    build_feature_cache,
    invert_reference,
    load_image,
    save_image,
)
from .regulation import RegulationConfig, edge_loss, regulate, sobel_gradients
from .scheduler import (
    LatentState,
    NoiseSchedule,
    Role,
    build_schedule,
    ddim_step,
    step_from_estimate,
    timestep_grid,
    tweedie_estimate,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass(frozen=True)
class LayerPolicy:
    """How injection layers are chosen.

    ``by_resolution`` with ``arg=None`` picks the decoder layers at the two
    highest decoder resolutions the backend exposes.
    """

    policy: str = "by_resolution"
    arg: tuple | None = None

    def resolve(self, backend) -> frozenset[int]:
        if self.policy == "by_resolution" and self.arg is None:
            res = sorted(
                {d.resolution for d in backend.attention_layers() if d.location == "decoder"},
                key=lambda r: r[0] * r[1],
            )
            return select_layers(backend, "by_resolution", res[-2:])
        return select_layers(backend, self.policy, self.arg or ())


@dataclass(frozen=True)
class RunConfig:
    prompt: str = ""
    references: tuple[str, ...] = ()
    injection: InjectionConfig = field(default_factory=lambda: InjectionConfig(mode="none"))
    layers: LayerPolicy = field(default_factory=LayerPolicy)
    blend: StyleBlendConfig = field(default_factory=lambda: StyleBlendConfig(enabled=False))
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    regulation: RegulationConfig = field(default_factory=RegulationConfig)
    steps: int = 100
    seed: int = 0
    brighten_threshold: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(str(r) for r in self.references))
        if self.steps < 1:
            raise ConfigError(f"steps: must be >= 1, got {self.steps}")
        if not -1.0 < self.brighten_threshold <= 1.0:
            raise ConfigError(f"brighten_threshold: must lie in (-1, 1], got {self.brighten_threshold}")
        n = len(self.references)
        if n == 0:
            if self.injection.mode is not InjectionMode.NONE:
                raise ConfigError("injection.mode: must be 'none' without references")
            if self.blend.enabled:
                raise ConfigError("blend.enabled: must be false without references")
        else:
            if self.blend.enabled and len(self.blend.eta) != n:
                raise ConfigError(f"blend.eta: {len(self.blend.eta)} weights for {n} references")
            if self.injection.mode is InjectionMode.KV_SWAP and n != 1:
                raise ConfigError(f"injection.mode: kv_swap needs exactly one reference, got {n}")
        if n >= 3:
            log.warning("%d references: more than two is experimental", n)

    @classmethod
    def preset(cls, name: str, references: Sequence[str] = (), **overrides) -> "RunConfig":
        """Defaults for ``professional`` or ``abstract`` reference styles.

        With references, injection is ``concat_smoothed`` and the AdaIN blend
        weights are uniform unless overridden.
        """
        if name == "professional":
            lam, guidance, regulation = 0.1, GuidanceConfig(), RegulationConfig()
        elif name == "abstract":
            lam = 0.05
            guidance = GuidanceConfig(omega1=15.0, omega2_max=25.0)
            regulation = RegulationConfig(gamma=60.0, enabled=True)
        else:
            raise ConfigError(f"preset: unknown preset {name!r}")
        n = len(references)
        base: dict[str, Any] = dict(
            references=tuple(references),
            injection=InjectionConfig(lam=lam, mode="concat_smoothed" if n else "none"),
            blend=StyleBlendConfig(eta=(1.0 / n,) * n, enabled=True) if n else StyleBlendConfig(enabled=False),
            guidance=guidance,
            regulation=regulation,
        )
        base.update(overrides)
        return cls(**base)

    # -- JSON mirror ---------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        inj = self.injection
        return {
            "prompt": self.prompt,
            "references": list(self.references),
            "injection": {
                "lambda": inj.lam,
                "mode": inj.mode.value,
                "layer_policy": self.layers.policy,
                "layers": _listify(self.layers.arg),
            },
            "blend": {
                "eta": list(self.blend.eta),
                "active_window": list(self.blend.active_window),
                "enabled": self.blend.enabled,
            },
            "guidance": {
                "omega1": self.guidance.omega1,
                "omega2": self.guidance.omega2_max,
                "ramp": self.guidance.ramp.value,
            },
            "regulation": {
                "gamma": self.regulation.gamma,
                "clamp": self.regulation.clamp,
                "enabled": self.regulation.enabled,
                "active_window": list(self.regulation.active_window),
            },
            "steps": self.steps,
            "seed": self.seed,
            "brighten_threshold": self.brighten_threshold,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        template = cls().to_dict()
        _reject_unknown(data, template, "")
        merged = _merge(template, data)
        if "blend" not in data or "enabled" not in data.get("blend", {}):
            merged["blend"]["enabled"] = bool(merged["references"])
        if "injection" not in data or "mode" not in data.get("injection", {}):
            merged["injection"]["mode"] = (
                InjectionMode.CONCAT_SMOOTHED.value if merged["references"] else "none"
            )
        if "blend" not in data or "eta" not in data.get("blend", {}):
            n = max(len(merged["references"]), 1)
            merged["blend"]["eta"] = [1.0 / n] * n
        try:
            inj, blend, guid, reg = (
                merged["injection"], merged["blend"], merged["guidance"], merged["regulation"]
            )
            layers = inj["layers"]
            return cls(
                prompt=str(merged["prompt"]),
                references=tuple(merged["references"]),
                injection=InjectionConfig(lam=float(inj["lambda"]), mode=inj["mode"]),
                layers=LayerPolicy(inj["layer_policy"], _tuplify(layers)),
                blend=StyleBlendConfig(
                    eta=tuple(blend["eta"]),
                    active_window=tuple(blend["active_window"]),
                    enabled=bool(blend["enabled"]),
                ),
                guidance=GuidanceConfig(
                    omega1=float(guid["omega1"]), omega2_max=float(guid["omega2"]), ramp=guid["ramp"]
                ),
                regulation=RegulationConfig(
                    gamma=float(reg["gamma"]),
                    clamp=float(reg["clamp"]),
                    enabled=bool(reg["enabled"]),
                    active_window=tuple(reg["active_window"]),
                ),
                steps=int(merged["steps"]),
                seed=int(merged["seed"]),
                brighten_threshold=float(merged["brighten_threshold"]),
            )
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        refs = data.get("references", [])
        if isinstance(refs, list):
            data["references"] = [str((path.parent / r).resolve()) if not Path(r).is_absolute() else r for r in refs]
        return cls.from_dict(data)


def _listify(x):
    if isinstance(x, (tuple, list)):
        return [_listify(v) for v in x]
    return x


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def _reject_unknown(data: dict, template: dict, prefix: str) -> None:
    for key, val in data.items():
        name = f"{prefix}{key}"
        if key not in template:
            raise ConfigError(f"{name}: unknown key")
        if isinstance(template[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{name}: expected an object")
            _reject_unknown(val, template[key], name + ".")


def _merge(template: dict, data: dict) -> dict:
    out = {}
    for key, val in template.items():
        if isinstance(val, dict):
            out[key] = _merge(val, data.get(key, {}))
        else:
            out[key] = data.get(key, val)
    return out


def apply_overrides(cfg_dict: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else as strings."""
    out = json.loads(json.dumps(cfg_dict))
    template = RunConfig().to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node, tnode = out, template
        for p in parts[:-1]:
            if not isinstance(tnode.get(p), dict):
                raise ConfigError(f"{key}: unknown key")
            node, tnode = node.setdefault(p, {}), tnode[p]
        if parts[-1] not in tnode or isinstance(tnode[parts[-1]], dict):
            raise ConfigError(f"{key}: unknown key")
        try:
            node[parts[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[parts[-1]] = raw
    return out


# -- synthesis -----------------------------------------------------------------


@dataclass
class PreparedReferences:
    bundles: list[ReferenceBundle]
    cache: FeatureCache
    layer_ids: frozenset[int]
    steps: int


@dataclass
class StepRecord:
    timestep: int
    omega2: float
    edge_loss_before: float | None = None
    edge_loss_after: float | None = None


@dataclass
class SynthesisResult:
    image: np.ndarray
    latent: LatentState
    config_echo: dict[str, Any]
    trace: list[StepRecord] | None = None


def schedule_for(backend) -> NoiseSchedule:
    return getattr(backend, "schedule", None) or build_schedule()


def prepare_references(cfg: RunConfig, backend, images: Sequence[np.ndarray] | None = None) -> PreparedReferences:
    sched = schedule_for(backend)
    grid = timestep_grid(sched, cfg.steps)
    if images is None:
        images = [load_image(p, backend.image_shape()) for p in cfg.references]
    layer_ids = cfg.layers.resolve(backend)
    bundles = [invert_reference(img, backend, sched, grid, k) for k, img in enumerate(images)]
    cache = build_feature_cache(bundles, backend, layer_ids, grid) if bundles else FeatureCache()
    return PreparedReferences(bundles, cache, layer_ids, cfg.steps)


def brighten(image: np.ndarray, threshold: float = 0.7) -> np.ndarray:
    """Push every pixel strictly above ``threshold`` to white (1.0)."""
    if not -1.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (-1, 1], got {threshold}")
    return np.where(image > threshold, 1.0, image)


def synthesize(
    cfg: RunConfig,
    backend,
    prepared: PreparedReferences | None = None,
    trace: bool = False,
) -> SynthesisResult:
    sched = schedule_for(backend)
    grid = timestep_grid(sched, cfg.steps)
    n = len(grid)
    if cfg.references and prepared is None:
        prepared = prepare_references(cfg, backend)
    if prepared is not None and prepared.steps != cfg.steps:
        raise ConfigError(f"steps: references prepared for {prepared.steps} steps, run uses {cfg.steps}")
    bundles = prepared.bundles if prepared else []
    if cfg.references and len(bundles) != len(cfg.references):
        raise ConfigError(f"references: {len(cfg.references)} configured, {len(bundles)} prepared")
    for b in bundles:
        if b.at(grid[0]).shape != backend.latent_shape():
            raise ConfigError(f"references: latent shape {b.at(grid[0]).shape} != {backend.latent_shape()}")

    inj = cfg.injection
    injecting = bool(bundles) and inj.mode is not InjectionMode.NONE
    if injecting:
        inj = dataclasses.replace(inj, layer_ids=prepared.layer_ids)

    rng = np.random.default_rng(cfg.seed)
    z = LatentState(rng.standard_normal(backend.latent_shape()), grid[0], Role.TARGET)
    null = backend.null_conditioning()
    text = backend.text_conditioning(cfg.prompt)
    records: list[StepRecord] = []

    for i, t in enumerate(grid):
        if bundles and cfg.blend.active_at(i, n):
            z = joint_adain(z, [b.at(t) for b in bundles], cfg.blend)
        eps_uncond = backend.predict_noise(z, t, null)
        if injecting:
            eps_content = backend.predict_noise(z, t, text, InjectionHooks(prepared.cache, inj, t))
            eps_style = backend.predict_noise(z, t, null, InjectionHooks(prepared.cache, inj, t))
        else:
            # without injection the style branch is the unconditional prediction
            eps_content = backend.predict_noise(z, t, text)
            eps_style = eps_uncond
        w2 = omega2_at(cfg.guidance, i, n)
        eps = combine(eps_uncond, eps_content, eps_style, cfg.guidance.omega1, w2)
        z0 = tweedie_estimate(z, eps, sched)
        rec = StepRecord(t, w2)
        if cfg.regulation.active_at(i, n):
            if trace:
                rec.edge_loss_before = edge_loss(*sobel_gradients(backend.decode(z0)))
            z0 = regulate(z0, backend, cfg.regulation)
            if trace:
                rec.edge_loss_after = edge_loss(*sobel_gradients(backend.decode(z0)))
        records.append(rec)
        z = step_from_estimate(z0, eps, grid.previous(i), sched, Role.TARGET)

    image = brighten(np.clip(backend.decode(z), -1.0, 1.0), cfg.brighten_threshold)
    return SynthesisResult(image, z, cfg.to_dict(), records if trace else None)


def vanilla_cfg_sample(
    backend, prompt: str, omega: float, steps: int, seed: int, sched: NoiseSchedule | None = None
) -> LatentState:
    """Plain classifier-free-guided DDIM sampling, no references."""
    sched = sched or schedule_for(backend)
    grid = timestep_grid(sched, steps)
    rng = np.random.default_rng(seed)
    z = LatentState(rng.standard_normal(backend.latent_shape()), grid[0])
    null, text = backend.null_conditioning(), backend.text_conditioning(prompt)
    for i, t in enumerate(grid):
        uncond = backend.predict_noise(z, t, null)
        cond = backend.predict_noise(z, t, text)
        z = ddim_step(z, uncond + omega * (cond - uncond), t, grid.previous(i), sched)
    return z


# -- sweeps ----------------------------------------------------------------------

SWEEP_AXES = ("lambda", "eta", "omega1", "omega2", "gamma")


def with_axis(base: RunConfig, axis: str, value: float) -> RunConfig:
    try:
        if axis == "lambda":
            return dataclasses.replace(base, injection=dataclasses.replace(base.injection, lam=float(value)))
        if axis == "eta":
            if len(base.references) != 2:
                raise ConfigError(f"eta sweep needs two references, got {len(base.references)}")
            blend = StyleBlendConfig.two_way(
                float(value), active_window=base.blend.active_window, enabled=base.blend.enabled
            )
            return dataclasses.replace(base, blend=blend)
        if axis == "omega1":
            return dataclasses.replace(base, guidance=dataclasses.replace(base.guidance, omega1=float(value)))
        if axis == "omega2":
            return dataclasses.replace(
                base, guidance=dataclasses.replace(base.guidance, omega2_max=float(value))
            )
        if axis == "gamma":
            return dataclasses.replace(
                base, regulation=dataclasses.replace(base.regulation, gamma=float(value))
            )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{axis}={value}: {exc}") from exc
    raise ConfigError(f"axis: unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


@dataclass
class SweepResult:
    axis: str
    values: list[float]
    results: list[SynthesisResult]
    sheet: np.ndarray

    def metadata(self) -> list[dict[str, Any]]:
        return [
            {"index": i, "axis": self.axis, "value": v, "config": r.config_echo}
            for i, (v, r) in enumerate(zip(self.values, self.results))
        ]


def _sweep_cell(args):
    cfg, backend, prepared = args
    return synthesize(cfg, backend, prepared)


def sweep(
    base: RunConfig, axis: str, values: Sequence[float], backend, jobs: int = 1
) -> SweepResult:
    if not values:
        raise ConfigError("values: at least one sweep value is required")
    configs = [with_axis(base, axis, v) for v in values]
    # reference preparation does not depend on any sweep axis
    prepared = prepare_references(base, backend) if base.references else None
    cells = [(c, backend, prepared) for c in configs]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    return SweepResult(axis, [float(v) for v in values], results, contact_sheet([r.image for r in results]))


def contact_sheet(images: Sequence[np.ndarray], gap: int = 2) -> np.ndarray:
    """Lay panels left to right on a white background, in the given order."""
    c, h, w = images[0].shape
    sheet = np.ones((c, h, len(images) * (w + gap) - gap))
    for k, img in enumerate(images):
        sheet[:, :, k * (w + gap) : k * (w + gap) + w] = img
    return sheet


def write_sweep(result: SweepResult, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = result.metadata()
    for entry, res in zip(meta, result.results):
        name = f"panel_{entry['index']:02d}_{result.axis}_{entry['value']:g}.png"
        save_image(res.image, out_dir / name)
        entry["file"] = name
    save_image(result.sheet, out_dir / "contact_sheet.png")
    sidecar = out_dir / "contact_sheet.json"
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_text(json.dumps({"axis": result.axis, "panels": meta}, indent=2))
    tmp.replace(sidecar)
    return out_dir / "contact_sheet.png"


def write_result(result: SynthesisResult, path: str | Path) -> None:
    save_image(result.image, path)
    if result.trace is not None:
        trace_path = Path(path).with_suffix(".trace.json")
        tmp = trace_path.with_name(trace_path.name + ".tmp")
        tmp.write_text(json.dumps([dataclasses.asdict(r) for r in result.trace], indent=2))
        tmp.replace(trace_path)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()
