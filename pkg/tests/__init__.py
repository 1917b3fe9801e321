from typing import Any, Dict


def _config_to_str(cfg: Dict[str, Any]) -> str:
    """Test id of a parametrized configuration, e.g. "base_width=16-lr=0.003"."""
    return "-".join([f"{k}={cfg[k]}" for k in sorted(cfg)])
