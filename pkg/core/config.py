"""
Configuration management for ConvGrid
"""

import os

DEFAULTS = {
    "solver": {"tol_rel": "1e-9", "max_iter": "200", "regularization": "1e-12"},
    "refine": {
        "rho": "1.5",
        "max_outer": "50",
        "multiplier_threshold": "1e-7",
        "violation_tol": "1e-9",
        "algorithm": "2",
        "cone": "conv",
    },
    "monopolist": {"exclusion_threshold": "1e-4", "bunching_threshold": "0.07"},
    "experiment": {"samples": "64", "seed": "0", "jobs": "1"},
}


class Config:
    """Numerical settings read from an INI-like file, with built-in defaults"""

    def __init__(self, config_file=None):
        self.config_file = config_file
        self.config = {section: dict(values) for section, values in DEFAULTS.items()}
        if config_file:
            self.load()

    def load(self):
        """Load config from file"""
        if not os.path.exists(self.config_file):
            return

        with open(self.config_file, "r") as f:
            section = None
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue

                if line.startswith("[") and line.endswith("]"):
                    section = line[1:-1].strip()
                    self.config.setdefault(section, {})
                elif "=" in line and section:
                    key, value = line.split("=", 1)
                    self.config[section][key.strip()] = value.strip()

    def get(self, section, key, default=None):
        """Get a config value"""
        return self.config.get(section, {}).get(key, default)

    def get_float(self, section, key, default=None) -> float:
        value = self.get(section, key, default)
        return float(value) if value is not None else None

    def get_int(self, section, key, default=None) -> int:
        value = self.get(section, key, default)
        return int(float(value)) if value is not None else None

    def solver_settings(self):
        from core.solver import SolverSettings

        return SolverSettings(
            tol_rel=self.get_float("solver", "tol_rel"),
            max_iter=self.get_int("solver", "max_iter"),
            regularization=self.get_float("solver", "regularization"),
        )

    def refine_settings(self):
        from core.refine import RefineSettings

        return RefineSettings(
            rho=self.get_float("refine", "rho"),
            max_outer=self.get_int("refine", "max_outer"),
            multiplier_threshold=self.get_float("refine", "multiplier_threshold"),
            violation_tol=self.get_float("refine", "violation_tol"),
            algorithm=self.get_int("refine", "algorithm"),
            cone_family=self.get("refine", "cone"),
            solver=self.solver_settings(),
        )

    def save(self, path=None):
        """Save config to file"""
        path = path or self.config_file
        with open(path, "w") as f:
            for section, kvs in self.config.items():
                f.write(f"[{section}]\n")
                for key, value in kvs.items():
                    f.write(f"\t{key} = {value}\n")
                f.write("\n")

    def set(self, section, key, value):
        """Set a config value"""
        if section not in self.config:
            self.config[section] = {}
        self.config[section][key] = str(value)

        if self.config_file:
            self.save()
