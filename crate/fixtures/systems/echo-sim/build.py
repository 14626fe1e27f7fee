"""echo-sim build step: records the build configuration."""
import json
import os
import sys

from common import effective

_, values, _ = effective("build", sys.argv[-1])
if values.get("fail_build"):
    print("build failed on request (fail_build=true)", file=sys.stderr)
    sys.exit(2)
os.makedirs("build", exist_ok=True)
with open("build/artifact.txt", "w") as f:
    for key in sorted(values):
        f.write("%s=%s\n" % (key, json.dumps(values[key])))
print("build ok: opt_level=%s" % values["opt_level"])
