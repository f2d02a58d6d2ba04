"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Values stay strings here; the
typed dataclasses that consume them do the conversion and name the field on
failure.
"""

from .errors import ConfigError


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path):
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())


def dump_kv(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def write_kv(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_kv(mapping))


def to_int(kv, key, default=None):
    if key not in kv:
        if default is None:
            raise ConfigError("missing required field", key)
        return default
    try:
        return int(kv[key])
    except ValueError:
        raise ConfigError(f"expected integer, got {kv[key]!r}", key) from None


def to_float(kv, key, default=None):
    if key not in kv:
        if default is None:
            raise ConfigError("missing required field", key)
        return default
    try:
        return float(kv[key])
    except ValueError:
        raise ConfigError(f"expected number, got {kv[key]!r}", key) from None


def to_int_list(kv, key, default=None):
    if key not in kv:
        if default is None:
            raise ConfigError("missing required field", key)
        return list(default)
    try:
        return [int(v) for v in kv[key].replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {kv[key]!r}", key) from None


def to_bool(kv, key, default):
    if key not in kv:
        return default
    value = kv[key].lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {kv[key]!r}", key)
