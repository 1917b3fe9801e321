from typing import Any, Iterable, Mapping, Tuple


def _flatten_dict_gen(d: Mapping, parent_key: str, sep: str) -> Iterable[Tuple[str, Any]]:
    for k, v in d.items():
        new_key = parent_key + sep + str(k) if parent_key else str(k)
        if isinstance(v, Mapping):
            yield from _flatten_dict_gen(v, new_key, sep=sep)
        else:
            yield new_key, v


def flatten_dict(d: Mapping, parent_key: str = "", sep: str = "/") -> dict:
    """Flatten a nested dictionary.

    Example:
        >>> flatten_dict({"unet": {"overall_rmse": 1.5, "extreme": {"count": 2}}, "winner": "unet"})
        {'unet/overall_rmse': 1.5, 'unet/extreme/count': 2, 'winner': 'unet'}
    """
    return dict(_flatten_dict_gen(d, parent_key, sep))
