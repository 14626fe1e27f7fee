"""echo-sim run step: writes a trace derived only from the run configuration."""
import hashlib
import json
import os
import sys

from common import effective, host_path

if not os.path.exists("build/artifact.txt"):
    print("not built", file=sys.stderr)
    sys.exit(5)

sysdef, values, files = effective("run", sys.argv[-1])
lines = [
    "$comment echo-sim trace $end",
    "$version %s %s $end" % (sysdef["name"], sysdef["version"]),
]
for key in sorted(values):
    lines.append("$param %s %s $end" % (key, json.dumps(values[key])))
    if key in files:
        try:
            with open(host_path(values[key]), "rb") as f:
                digest = hashlib.sha256(f.read()).hexdigest()
        except OSError:
            digest = "missing"
        lines.append("$input %s %s $end" % (key, digest))
lines.append("$enddefinitions $end")

os.makedirs("vp/output", exist_ok=True)
with open("vp/output/sim_trace.vcd", "w") as f:
    f.write("\n".join(lines) + "\n")
print("trace written: %d parameters" % len(values))
sys.exit(int(values.get("exit_code", 0)))
