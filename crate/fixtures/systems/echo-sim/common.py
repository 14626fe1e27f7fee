"""Helpers shared by the echo-sim build and run steps."""
import json
import os


def effective(phase, syscfg_path):
    """Merge SysCfg overrides for `phase` onto the SysDef defaults."""
    with open("sysdef.json") as f:
        sysdef = json.load(f)
    with open(syscfg_path) as f:
        cfg = json.load(f)
    declared = sysdef.get(phase + "_parameters", {})
    overrides = cfg.get(phase + "_parameters", {})
    values = {}
    files = set()
    for key, spec in declared.items():
        if isinstance(spec, dict):
            default = spec["default_value"]
            if spec.get("is_file", False):
                files.add(key)
        else:
            default = spec
        values[key] = overrides.get(key, default)
    return sysdef, values, files


def host_path(path):
    """Resolve an in-container /sysapi path when running outside a container."""
    root = os.environ.get("SYSAPI_ROOT")
    if root and path.startswith("/sysapi/"):
        return os.path.join(root, path[len("/sysapi/"):])
    return path
