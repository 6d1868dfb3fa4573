# The benchmark scenarios from Python; the CLI wraps the same calls.
from quarklet.bench import BenchConfig, run

config = BenchConfig(seed=1, requests=300, total_bytes=2 << 20, connects=100, app_pages=512)

for scenario in ("connect", "echo", "stream", "qcall", "startup"):
    report = run(scenario, config)
    print(report.to_markdown())

# same seed, same counters
a = run("stream", config).counters()
b = run("stream", config).counters()
print("reproducible counters:", a == b)
