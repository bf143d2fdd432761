"""Run configuration: flat-sectioned text files (configparser syntax),
one documented default per key, strict validation, and command-line
``--section.key=value`` overrides."""

from __future__ import annotations

import configparser
import os
import zlib
from pathlib import Path

import numpy as np

ENV_CONFIG = "QT1MAP_CONFIG"


class ConfigError(ValueError):
    """Invalid configuration: unknown key/section or bad value."""


# Every known key with its default (as the string configparser yields).
DEFAULTS: dict[str, dict[str, str]] = {
    "run": {
        "seed": "1234",
        "out_dir": "qt1map_out",
        "threads": "1",
    },
    "acquisition": {
        "mp2rage_tr": "8.25",
        "tr": "0.006",
        "ti": "1.010 3.683 6.355",
        "n_pulses": "225",
        "flip_angles": "4 4 4",
        "inv_eff": "0.84",
    },
    "sir": {
        "ti": "0.006 0.010 0.016 0.026 0.043 0.068 0.110 0.178 0.288 0.468 0.760 1.230 2.000 8.000",
        "td": "0.0025",
        "pulse_duration": "0.010",
        "pulse_peak": "6000.0",
        "pulse_mu": "5.0",
        "pulse_beta": "1060.0",
        "fit_r1f_init": "0.7",
        "fit_psr_init": "0.1",
        "fit_kmf_init": "12.0",
        "fit_sf_init": "-0.9",
        "fit_m_inf_init": "1.0",
        "fit_bounds_lo": "0.3 0.05 5.0 -1.0 1e-6",
        "fit_bounds_hi": "1.2 0.25 30.0 1.0 1e6",
        "fit_max_iter": "500",
    },
    "monte_carlo": {
        "trials": "1000000",
        "sigma": "auto",  # number, or 'auto' to estimate from subject 0
        "t1_bins": "500",
        "s_bins": "100",
        "b1_points": "41",
        "b1_lo": "0.0",
        "b1_hi": "2.0",
        "observables": "1 2",
        "auto_build": "true",
    },
    "phantom": {
        "subjects": "4",
        "dims": "64 64 16",
        "spacing": "1.0 1.0 1.0",
        "t1_wm": "1.48",
        "t1_sgm": "1.74",
        "t1_cgm": "2.05",
        "t1_sd": "0.03",
        "bias_wm": "0.828",
        "bias_sgm": "0.891",
        "bias_cgm": "0.953",
        "noise_sigma": "0.005",
        "sir_noise_frac": "0.01",
        "b1_amplitude": "0.2",
        "sir_psr": "0.15",
        "sir_kmf": "10.0",
        "sir_sf": "-0.95",
        "sir_m_inf": "1.0",
    },
    "network": {
        "patch_size": "5",
        "channels": "1",
        "width": "16",
        "blocks": "4",
        "learning_rate": "1e-5",
        "batch_size": "256",
        "max_steps": "10000",
        "val_interval": "50",
        "patience": "1000",
        "val_cap": "0",  # 0 disables validation subsampling
    },
    "analysis": {
        "alpha": "0.05",
        "reference": "sir",
    },
    "sweep": {
        "noise_sigmas": "0.001 0.005 0.01 0.015 0.02",
        "patch_sizes": "1 5 9 13",
        "b1_factors": "0.6 0.8 1.0 1.2 1.4",
        "inv_effs": "0.7 0.8 0.84 0.9 1.0",
        "acq_param_scale": "0.9 1.0 1.1",  # applied to ti / mp2rage_tr
        "max_steps": "2000",
    },
}


class RunConfig:
    """Fully-resolved configuration: defaults, file, then overrides."""

    def __init__(self, sections: dict[str, dict[str, str]]):
        self._sections = sections
        self.validate()

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        overrides: list[str] | None = None,
    ) -> "RunConfig":
        sections = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if path is None:
            path = os.environ.get(ENV_CONFIG) or None
        if path is not None:
            cp = configparser.ConfigParser()
            read = cp.read(path)
            if not read:
                raise ConfigError(f"config file not found: {path}")
            for sec in cp.sections():
                if sec not in sections:
                    raise ConfigError(f"unknown config section [{sec}]")
                for key, val in cp[sec].items():
                    if key not in sections[sec]:
                        raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                    sections[sec][key] = val
        for ov in overrides or []:
            if "=" not in ov or "." not in ov.split("=", 1)[0]:
                raise ConfigError(
                    f"override must look like section.key=value, got {ov!r}"
                )
            dotted, val = ov.split("=", 1)
            sec, key = dotted.split(".", 1)
            sec = sec.lstrip("-")
            if sec not in sections:
                raise ConfigError(f"unknown config section [{sec}]")
            if key not in sections[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            sections[sec][key] = val
        return cls(sections)

    # -- typed getters ----------------------------------------------------
    def raw(self, section: str, key: str) -> str:
        try:
            return self._sections[section][key]
        except KeyError:
            raise ConfigError(f"unknown config entry [{section}] {key}") from None

    def get_int(self, section: str, key: str) -> int:
        try:
            return int(self.raw(section, key))
        except ValueError:
            raise ConfigError(
                f"[{section}] {key} must be an integer, got {self.raw(section, key)!r}"
            ) from None

    def get_float(self, section: str, key: str) -> float:
        try:
            return float(self.raw(section, key))
        except ValueError:
            raise ConfigError(
                f"[{section}] {key} must be a number, got {self.raw(section, key)!r}"
            ) from None

    def get_bool(self, section: str, key: str) -> bool:
        v = self.raw(section, key).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean, got {v!r}")

    def get_floats(self, section: str, key: str) -> tuple[float, ...]:
        try:
            return tuple(float(v) for v in self.raw(section, key).split())
        except ValueError:
            raise ConfigError(
                f"[{section}] {key} must be numbers, got {self.raw(section, key)!r}"
            ) from None

    def get_ints(self, section: str, key: str) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in self.raw(section, key).split())
        except ValueError:
            raise ConfigError(
                f"[{section}] {key} must be integers, got {self.raw(section, key)!r}"
            ) from None

    @property
    def out_dir(self) -> Path:
        return Path(self.raw("run", "out_dir"))

    @property
    def seed(self) -> int:
        return self.get_int("run", "seed")

    # -- object builders ---------------------------------------------------
    def acquisition_params(self):
        from .mp2rage import AcquisitionParams

        return AcquisitionParams(
            mp2rage_tr=self.get_float("acquisition", "mp2rage_tr"),
            tr=self.get_float("acquisition", "tr"),
            ti=self.get_floats("acquisition", "ti"),
            n_pulses=self.get_int("acquisition", "n_pulses"),
            flip_angles=self.get_floats("acquisition", "flip_angles"),
            inv_eff=self.get_float("acquisition", "inv_eff"),
        )

    def sir_acquisition(self, sm: float = 0.83):
        from .sir import SirAcquisition

        return SirAcquisition(
            ti=self.get_floats("sir", "ti"),
            td=self.get_float("sir", "td"),
            sm=sm,
        )

    def sech_pulse(self):
        from .sir import SechPulse

        return SechPulse(
            duration=self.get_float("sir", "pulse_duration"),
            peak=self.get_float("sir", "pulse_peak"),
            mu=self.get_float("sir", "pulse_mu"),
            beta=self.get_float("sir", "pulse_beta"),
        )

    def sir_fit_settings(self):
        from .sir import SirModelParams

        init = SirModelParams(
            r1f=self.get_float("sir", "fit_r1f_init"),
            psr=self.get_float("sir", "fit_psr_init"),
            kmf=self.get_float("sir", "fit_kmf_init"),
            sf=self.get_float("sir", "fit_sf_init"),
            m_inf=self.get_float("sir", "fit_m_inf_init"),
        )
        lo = self.get_floats("sir", "fit_bounds_lo")
        hi = self.get_floats("sir", "fit_bounds_hi")
        if len(lo) != 5 or len(hi) != 5:
            raise ConfigError("[sir] fit bounds need 5 values each")
        return init, (lo, hi), self.get_int("sir", "fit_max_iter")

    def phantom_spec(self):
        from .phantom import PhantomSpec
        from .volume import LABEL_CGM, LABEL_SGM, LABEL_WM

        dims = self.get_ints("phantom", "dims")
        spacing = self.get_floats("phantom", "spacing")
        if len(dims) != 3 or len(spacing) != 3:
            raise ConfigError("[phantom] dims and spacing need 3 values")
        return PhantomSpec(
            dims=dims,
            spacing=spacing,
            tissue_t1={
                LABEL_WM: self.get_float("phantom", "t1_wm"),
                LABEL_SGM: self.get_float("phantom", "t1_sgm"),
                LABEL_CGM: self.get_float("phantom", "t1_cgm"),
            },
            t1_sd=self.get_float("phantom", "t1_sd"),
            bias_factors={
                LABEL_WM: self.get_float("phantom", "bias_wm"),
                LABEL_SGM: self.get_float("phantom", "bias_sgm"),
                LABEL_CGM: self.get_float("phantom", "bias_cgm"),
            },
            noise_sigma=self.get_float("phantom", "noise_sigma"),
            sir_noise_frac=self.get_float("phantom", "sir_noise_frac"),
            b1_amplitude=self.get_float("phantom", "b1_amplitude"),
            sir_psr=self.get_float("phantom", "sir_psr"),
            sir_kmf=self.get_float("phantom", "sir_kmf"),
            sir_sf=self.get_float("phantom", "sir_sf"),
            sir_m_inf=self.get_float("phantom", "sir_m_inf"),
        )

    def grid_spec(self, observables: int):
        from .posterior import GridSpec

        return GridSpec(
            t1_bins=self.get_int("monte_carlo", "t1_bins"),
            s_bins=self.get_int("monte_carlo", "s_bins"),
            b1_grid=tuple(np.linspace(
                self.get_float("monte_carlo", "b1_lo"),
                self.get_float("monte_carlo", "b1_hi"),
                self.get_int("monte_carlo", "b1_points"),
            )),
            observables=observables,
        )

    def network_config(self, **over):
        from .calib import NetworkConfig

        kw = dict(
            patch_size=self.get_int("network", "patch_size"),
            channels=self.get_int("network", "channels"),
            width=self.get_int("network", "width"),
            blocks=self.get_int("network", "blocks"),
            learning_rate=self.get_float("network", "learning_rate"),
            batch_size=self.get_int("network", "batch_size"),
            max_steps=self.get_int("network", "max_steps"),
            val_interval=self.get_int("network", "val_interval"),
            patience=self.get_int("network", "patience"),
            seed=self.seed,
        )
        kw.update(over)
        return NetworkConfig(**kw)

    @property
    def val_cap(self) -> int | None:
        cap = self.get_int("network", "val_cap")
        return cap if cap > 0 else None

    # -- validation ---------------------------------------------------------
    def validate(self) -> None:
        """Parse every known key once so a bad value fails before any work."""
        self.acquisition_params()
        self.sir_acquisition()
        self.sech_pulse()
        self.sir_fit_settings()
        self.phantom_spec()
        self.grid_spec(1)
        self.network_config()
        self.get_int("run", "seed")
        self.get_int("run", "threads")
        trials = self.get_int("monte_carlo", "trials")
        if trials < 1:
            raise ConfigError("[monte_carlo] trials must be >= 1")
        sig = self.raw("monte_carlo", "sigma")
        if sig != "auto":
            if self.get_float("monte_carlo", "sigma") < 0:
                raise ConfigError("[monte_carlo] sigma must be >= 0 or 'auto'")
        obs = self.get_ints("monte_carlo", "observables")
        if not obs or any(o not in (1, 2) for o in obs):
            raise ConfigError("[monte_carlo] observables must list 1 and/or 2")
        self.get_bool("monte_carlo", "auto_build")
        if self.get_int("phantom", "subjects") < 1:
            raise ConfigError("[phantom] subjects must be >= 1")
        a = self.get_float("analysis", "alpha")
        if not 0 < a < 1:
            raise ConfigError("[analysis] alpha must be in (0, 1)")
        if self.raw("analysis", "reference") not in ("sir", "truth"):
            raise ConfigError("[analysis] reference must be 'sir' or 'truth'")
        for key in ("noise_sigmas", "b1_factors", "inv_effs", "acq_param_scale"):
            if not self.get_floats("sweep", key):
                raise ConfigError(f"[sweep] {key} must not be empty")
        if not self.get_ints("sweep", "patch_sizes"):
            raise ConfigError("[sweep] patch_sizes must not be empty")
        self.get_int("sweep", "max_steps")
        self.get_int("network", "val_cap")

    def echo(self) -> str:
        cp = configparser.ConfigParser()
        for sec, kv in self._sections.items():
            cp[sec] = kv
        import io

        out = io.StringIO()
        cp.write(out)
        return out.getvalue()


def derive_seed(global_seed: int, stage: str, index: int = 0) -> int:
    """Named, stable seed derivation: one global seed fans out to every
    stage via (stage-name CRC, index)."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(stage.encode()), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
