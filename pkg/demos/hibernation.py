# Sandbox lifecycle: warm -> hibernated (memory on disk) -> woken lazily.
import tempfile
from pathlib import Path

import numpy as np

from quarklet.hibernate import Sandbox

rng = np.random.default_rng(0)
images = rng.integers(0, 256, size=(256, 4096), dtype=np.uint8)

with tempfile.TemporaryDirectory() as tmp, Sandbox(Path(tmp) / "app.swap") as sb:
    sb.boot()
    for vpn, img in enumerate(images):
        sb.map_page(vpn, img)
    print(sb.state.value, "resident bytes:", sb.resident_bytes())

    stats = sb.hibernate()
    print(sb.state.value, "pages swapped:", stats.pages_swapped, "resident bytes:", sb.resident_bytes())
    print("arena bytes still held from the host:", sb.arena.host_resident_bytes)

    sb.wakeup()
    print(sb.state.value, "resident right after wakeup:", sb.resident_bytes())   # nothing yet

    # touching a page faults it in from the swap file
    for vpn in (3, 17, 200):
        assert sb.access_page(vpn) == images[vpn].tobytes()
    print("swap-ins after touching 3 pages:", sb.swapin_count)

    # a request cycle: Running -> Warm pulls in whatever is still on disk
    sb.begin_request()
    sb.access_page(42, "write", b"hello", offset=100)
    sb.end_request()
    print(sb.state.value, "resident bytes:", sb.resident_bytes(), "settled pages:", sb.settled_pages)
