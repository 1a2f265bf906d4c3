"""Named presets and INI-style configuration files.

A config file has sections [pipeline], [guidance], [weights], [schedule],
[ransac]; unknown keys are rejected. ``config_hash`` is the SHA-256 of the
file bytes.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import replace

from .errors import InvalidConfigError
from .guide import GuidanceConfig, NoiseSchedule
from .losses import TERMS, LossWeights
from .pipeline import PipelineConfig
from .pose import RansacConfig

_ZERO = LossWeights.zeros()


def _no_term(term: str) -> LossWeights:
    d = LossWeights().as_dict()
    d[term] = 0.0
    return LossWeights(*(d[k] for k in TERMS))


def _presets() -> dict[str, tuple[str, PipelineConfig]]:
    g = GuidanceConfig()
    base = PipelineConfig()
    p = {
        "full": ("geometry then scale guidance in the last 2 steps", base),
        "scale-first": ("scale then geometry guidance", replace(base, guidance=g.with_(order="scale_then_geometry"))),
        "scale-only": ("scale guidance only", replace(base, guidance=g.with_(geometry_weights=_ZERO))),
        "geometry-only": ("geometry guidance only", replace(base, guidance=g.with_(scale_strength=0.0))),
        "baseline": ("no guidance", replace(base, guidance=g.with_(scale_strength=0.0, geometry_weights=_ZERO))),
        "post-opt": ("no in-loop guidance; scale and geometry after inference",
                     replace(base, guidance=g.with_(guided_steps=()), post="both")),
        "post-scale": ("no in-loop guidance; scale alignment after inference",
                       replace(base, guidance=g.with_(guided_steps=()), post="scale")),
        "post-geometry": ("no in-loop guidance; geometry optimisation after inference",
                          replace(base, guidance=g.with_(guided_steps=()), post="geometry")),
        "ours-s": ("scale guidance at the penultimate step only",
                   replace(base, guidance=g.with_(geometry_weights=_ZERO, guided_steps=(2,)))),
        "dynamic": ("scale guidance only, for scenes with moving content",
                    replace(base, guidance=g.with_(geometry_weights=_ZERO))),
    }
    for term in TERMS:
        p[f"no-{term}"] = (f"full guidance without the {term} term",
                           replace(base, guidance=g.with_(geometry_weights=_no_term(term))))
    for k in range(1, 6):
        p[f"last-{k}"] = (f"full guidance in the last {k} steps",
                          replace(base, guidance=g.with_(guided_steps=tuple(range(k, 0, -1)))))
    return p


PRESETS = _presets()


def preset(name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise InvalidConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return PRESETS[name][1]


def _fmt_steps(s) -> str:
    return ",".join(str(x) for x in s)


def _parse_steps(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(x) for x in s.split(",") if x.strip()) if s else ()


def to_ini(cfg: PipelineConfig) -> str:
    g = cfg.guidance
    cp = configparser.ConfigParser()
    cp["pipeline"] = {
        "window_size": str(cfg.window_size),
        "overlap": str(cfg.overlap),
        "blend": repr(cfg.blend),
        "seed": str(cfg.seed),
        "init_noise_level": "" if cfg.init_noise_level is None else str(cfg.init_noise_level),
        "post": cfg.post,
    }
    strength = g.scale_strength
    cp["guidance"] = {
        "scale_strength": repr(float(strength)) if isinstance(strength, (int, float))
        else ",".join(f"{k}:{v!r}" for k, v in strength),
        "scale_strength_mode": g.scale_strength_mode,
        "inner_steps": str(g.inner_steps),
        "inner_step_size": repr(g.inner_step_size),
        "guided_steps": _fmt_steps(g.guided_steps),
        "scale_steps": "" if g.scale_steps is None else _fmt_steps(g.scale_steps),
        "geometry_steps": "" if g.geometry_steps is None else _fmt_steps(g.geometry_steps),
        "order": g.order,
        "pose_source": g.pose_source,
        "max_halvings": str(g.max_halvings),
    }
    cp["weights"] = {k: repr(v) for k, v in zip(("alpha_d", "alpha_t", "alpha_n", "alpha_s"),
                                                 g.geometry_weights.as_dict().values())}
    cp["schedule"] = {"alpha_bar": ",".join(repr(a) for a in cfg.schedule.alpha_bar)}
    r = cfg.ransac
    cp["ransac"] = {"iterations": str(r.iterations), "inlier_threshold": repr(r.inlier_threshold),
                    "min_inliers": str(r.min_inliers), "seed": str(r.seed), "confidence": repr(r.confidence)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


_KNOWN = {
    "pipeline": {"window_size", "overlap", "blend", "seed", "init_noise_level", "post", "preset"},
    "guidance": {"scale_strength", "scale_strength_mode", "inner_steps", "inner_step_size", "guided_steps",
                 "scale_steps", "geometry_steps", "order", "pose_source", "max_halvings"},
    "weights": {"alpha_d", "alpha_t", "alpha_n", "alpha_s"},
    "schedule": {"alpha_bar", "steps", "first", "last"},
    "ransac": {"iterations", "inlier_threshold", "min_inliers", "seed", "confidence"},
}


def from_ini(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a config file; keys not given keep the values of ``base``
    (or of the preset named by ``[pipeline] preset``)."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfigError(f"cannot parse config: {exc}") from exc
    for sec in cp.sections():
        if sec not in _KNOWN:
            raise InvalidConfigError(f"unknown section [{sec}]")
        extra = set(cp[sec]) - _KNOWN[sec]
        if extra:
            raise InvalidConfigError(f"unknown keys in [{sec}]: {', '.join(sorted(extra))}")
    if base is None:
        name = cp.get("pipeline", "preset", fallback="full")
        base = preset(name)
    try:
        g = base.guidance
        gk = {}
        if cp.has_section("guidance"):
            s = cp["guidance"]
            if "scale_strength" in s:
                v = s["scale_strength"]
                gk["scale_strength"] = (tuple((int(a), float(b)) for a, b in
                                              (x.split(":") for x in v.split(",")))
                                        if ":" in v else float(v))
            for key in ("scale_strength_mode", "order", "pose_source"):
                if key in s:
                    gk[key] = s[key].strip()
            for key in ("inner_steps", "max_halvings"):
                if key in s:
                    gk[key] = int(s[key])
            if "inner_step_size" in s:
                gk["inner_step_size"] = float(s["inner_step_size"])
            if "guided_steps" in s:
                gk["guided_steps"] = _parse_steps(s["guided_steps"])
            for key in ("scale_steps", "geometry_steps"):
                if key in s:
                    gk[key] = _parse_steps(s[key]) if s[key].strip() else None
        if cp.has_section("weights"):
            w = g.geometry_weights.as_dict()
            vals = dict(zip(("alpha_d", "alpha_t", "alpha_n", "alpha_s"), w.values()))
            vals.update({k: float(v) for k, v in cp["weights"].items()})
            gk["geometry_weights"] = LossWeights(**vals)
        pk = {}
        if cp.has_section("pipeline"):
            s = cp["pipeline"]
            for key in ("window_size", "overlap", "seed"):
                if key in s:
                    pk[key] = int(s[key])
            if "blend" in s:
                pk["blend"] = float(s["blend"])
            if "init_noise_level" in s:
                pk["init_noise_level"] = int(s["init_noise_level"]) if s["init_noise_level"].strip() else None
            if "post" in s:
                pk["post"] = s["post"].strip()
        if cp.has_section("schedule"):
            s = cp["schedule"]
            if "alpha_bar" in s:
                pk["schedule"] = NoiseSchedule(tuple(float(x) for x in s["alpha_bar"].split(",")))
            elif {"steps", "first", "last"} & set(s):
                pk["schedule"] = NoiseSchedule.geometric(int(s.get("steps", 5)), float(s.get("first", 0.99)),
                                                         float(s.get("last", 0.01)))
        if cp.has_section("ransac"):
            s = cp["ransac"]
            r = base.ransac
            pk["ransac"] = RansacConfig(int(s.get("iterations", r.iterations)),
                                        float(s.get("inlier_threshold", r.inlier_threshold)),
                                        int(s.get("min_inliers", r.min_inliers)),
                                        int(s.get("seed", r.seed)),
                                        float(s.get("confidence", r.confidence)))
        cfg = replace(base, guidance=replace(g, **gk), **pk)
    except (ValueError, TypeError) as exc:
        raise InvalidConfigError(str(exc)) from exc
    cfg.guidance.validate(cfg.schedule)
    return cfg


def config_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
