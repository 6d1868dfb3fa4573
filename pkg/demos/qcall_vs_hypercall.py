# Privileged calls: trap-per-call versus queued QCall jobs with handler threads.
import tempfile
import time

from quarklet.qcall import FilePolicy, HostContext, QcallEngine, QcallJob

CALLS_PER_THREAD = 100
HOST_LATENCY_US = 50.0        # host-side work per call (an I/O, say)


def worker(tid):
    def body():
        for k in range(CALLS_PER_THREAD):
            res = yield QcallJob.host_op("echo", f"{tid}:{k}".encode(), latency_us=HOST_LATENCY_US)
            assert res.payload == f"{tid}:{k}".encode()
        return tid
    return body


with tempfile.TemporaryDirectory() as scratch:
    host = HostContext(FilePolicy(scratch))
    for mode in ("sync", "qcall"):
        engine = QcallEngine(host, mode=mode, vcpus=1, handlers=1, trap_cost_us=2.0)
        t0 = time.perf_counter()
        engine.run([worker(t) for t in range(8)])
        wall = time.perf_counter() - t0
        print(f"{mode:5s} wall={wall * 1e3:7.2f} ms  context switches={engine.context_switches:5d}  "
              f"hypercalls={engine.hypercalls:4d}  idle transitions={engine.idle_transitions}")

    # opening a file goes through policy on the host side
    engine = QcallEngine(host)
    out = []

    def opener():
        out.append((yield QcallJob.open_file("notes.txt", "rw")))
        out.append((yield QcallJob.open_file("../etc/passwd", "r")))

    engine.run([opener])
    print("open results:", [(r.code, r.payload) for r in out])
    host.close()
