"""Flat ``key = value`` run configuration shared by every subcommand.

Lines are ``key = value``; ``#`` starts a comment.  Unknown keys are an
error.  Command-line flags override file values, and the resolved
configuration is what every run logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(kind):
    def parse(text: str):
        if isinstance(text, str) and text.strip().lower() in ("", "none", "auto"):
            return None
        return kind(text)
    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _counts(text: str) -> tuple:
    parts = tuple(int(p) for p in str(text).replace(",", " ").split())
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"expected three positive counts, got {text!r}")
    return parts


# key: (parser, default, help)
KEYS = {
    # simulation
    "case": (str, "tgv", "flow case: tgv or rpf"),
    "seed": (int, 0, "random seed (initial jitter, training sampling, weight init)"),
    "n_particles": (int, 8000, "particles per trajectory"),
    "dt": (float, 0.001, "solver time step"),
    "n_steps": (_optional(int), None, "solver steps (tgv 1000, rpf 120000)"),
    "subsample_every": (_optional(int), None, "store every k-th solver state (tgv 1, rpf 10)"),
    "re": (_optional(float), None, "Reynolds number (tgv 100, rpf 10)"),
    "f0": (_optional(float), None, "RPF body-force magnitude (default 1)"),
    "rho0": (float, 1.0, "reference density"),
    "u_ref": (float, 1.0, "reference velocity"),
    "c0_factor": (float, 10.0, "artificial sound speed in units of u_ref"),
    "h_factor": (float, 1.0, "smoothing length in units of dx"),
    "p_background_factor": (float, 5.0, "background pressure in units of rho0 u_ref^2"),
    "k_multiple": (int, 1, "TGV wavenumber in units of 2 pi"),
    "jitter": (float, 0.05, "initial lattice jitter in units of dx"),
    "divergence_free_variant": (_bool, False, "use the divergence-free TGV field"),
    "artificial_stress": (_bool, True, "include the transport-velocity stress term"),
    "relax_steps": (int, 50, "damped relaxation steps before assigning TGV velocities"),
    "relax_damping": (float, 0.1, "velocity damping per relaxation step"),
    # dataset
    "n_tgv_trajectories": (int, 12, "TGV trajectories in a dataset"),
    "rpf_seed_offset": (int, 100, "RPF seed relative to the base seed"),
    "tgv_split": (_counts, (8, 2, 2), "TGV train/valid/test trajectory counts"),
    "rpf_split": (_counts, (8000, 2000, 2000), "RPF train/valid/test frame counts"),
    # features
    "history": (int, 5, "past velocities per node"),
    "radius_factor": (float, 1.5, "connectivity radius in units of dx"),
    "noise_std": (float, 6.7e-4, "training noise (normalized velocity units)"),
    "force_concat": (_optional(_bool), None, "append the body force to node features (auto: rpf)"),
    # model
    "latent": (int, 64, "latent width"),
    "n_blocks": (int, 3, "message-passing blocks"),
    "hidden_layers": (int, 2, "hidden layers per MLP"),
    "layernorm": (_bool, True, "LayerNorm after encoder and processor MLPs"),
    # training
    "steps": (int, 5000, "training steps"),
    "batch_size": (int, 1, "graphs per training step"),
    "lr_init": (float, 1e-4, "initial learning rate"),
    "lr_final": (float, 1e-6, "asymptotic learning rate"),
    "decay_steps": (float, 5e6, "steps per tenfold learning-rate decay"),
    "log_every": (int, 100, "training log interval"),
    # evaluation
    "rollout_steps": (int, 100, "rollout length"),
    "rollout_start": (_optional(int), None, "first rollout frame (default: history)"),
    "sinkhorn_every": (int, 10, "evaluate Sinkhorn every k steps (0 disables)"),
    "eps": (_optional(float), None, "Sinkhorn regularization (default from point spacing)"),
    "sinkhorn_points": (_optional(int), 500, "particle subset for Sinkhorn (none: all)"),
    "sinkhorn_max_iter": (int, 1000, "Sinkhorn iteration cap"),
    "sinkhorn_tol": (float, 1e-9, "Sinkhorn marginal tolerance"),
    "timing_repeats": (int, 10, "timed repetitions for the inference time"),
    "threads": (_optional(int), None, "worker threads (default: all cores)"),
}


def parse_value(key: str, value):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _, _ = KEYS[key]
    if not isinstance(value, str):
        return value
    try:
        return parser(value.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d, _) in KEYS.items()})

    def __getattr__(self, key):
        values = self.__dict__.get("values", {})
        if key in values:
            return values[key]
        raise AttributeError(key)

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg.values[key] = parse_value(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{origin}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_text(Path(path).read_text(), str(path))

    def merged(self, overrides: dict) -> "RunConfig":
        """Copy with every non-``None`` override applied (flags win)."""
        values = dict(self.values)
        for key, value in overrides.items():
            if value is not None:
                values[key] = parse_value(key, value)
        return RunConfig(values)

    def dump(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(str(x) for x in v)
            return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)
        return "\n".join(f"{k} = {fmt(v)}" for k, v in self.values.items())

    # -- views for the modules --------------------------------------------

    def case_config(self, case: str | None = None):
        from .sph import CaseConfig

        v = self.values
        return CaseConfig(
            case=case or v["case"], n_particles=v["n_particles"], dt=v["dt"],
            n_steps=v["n_steps"], subsample_every=v["subsample_every"], re=v["re"],
            f0=v["f0"], rho0=v["rho0"], u_ref=v["u_ref"], c0_factor=v["c0_factor"],
            h_factor=v["h_factor"], p_background_factor=v["p_background_factor"],
            k_multiple=v["k_multiple"], jitter=v["jitter"],
            divergence_free_variant=v["divergence_free_variant"],
            artificial_stress=v["artificial_stress"], relax_steps=v["relax_steps"],
            relax_damping=v["relax_damping"])

    def uses_force(self, case: str | None = None) -> bool:
        fc = self.values["force_concat"]
        return (case or self.values["case"]) == "rpf" if fc is None else fc

    def gns_spec(self, node_in: int):
        from .gns import GnsSpec

        v = self.values
        return GnsSpec(node_in=node_in, latent=v["latent"], n_blocks=v["n_blocks"],
                       hidden_layers=v["hidden_layers"], layernorm=v["layernorm"])

    def adam_hyper(self) -> dict:
        v = self.values
        return {"lr_init": v["lr_init"], "lr_final": v["lr_final"],
                "decay_steps": v["decay_steps"]}
