from .dictionary import flatten_dict
from .threads import available_cores, resolve_threads, torch_threads
