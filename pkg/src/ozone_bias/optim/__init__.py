from .adam import Adam, AdamState, adam_step, adam_update
