import json
import sys

with open(sys.argv[-1]) as f:
    cfg = json.load(f)
print("compile_args:", cfg.get("build_parameters", {}).get("compile_args", "-O3 -Wall"))
