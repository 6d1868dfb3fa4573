# Socket calls over a per-node service and one shared connection per node pair.
import hashlib
import random
import threading

from quarklet.transport import PodAddr
from quarklet.tsor import Cluster, parse_region

cluster = Cluster(2, seed=7)
web = cluster.add_pod("node0", "10.0.0.1")
db = cluster.add_pod("node1", "10.0.1.1")

db.sys_listen(5432)
msgs = cluster.cross_node_messages
conn = web.sys_connect(PodAddr("10.0.1.1", 5432))
peer = db.sys_accept(5432)
print("messages for the handshake:", cluster.cross_node_messages - msgs)
print("node connections:", len(cluster.fabric.connections))
print("initial credit:", web.channels[conn].credit)

web.sys_write(conn, b"SELECT 1")
print("db reads:", db.sys_read(peer))

# writes coalesce: only the first write into an empty ring rings the doorbell
cluster.services["node0"].paused = True
pushed = web.region.sq.pushed
for i in range(50):
    web.sys_write(conn, b"x")
print("SQ entries for 50 writes:", web.region.sq.pushed - pushed)
print("SQ as the service would see it:", parse_region(bytes(web.region.buffer))["sq"])
cluster.services["node0"].paused = False
db.sys_read_exact(peer, 50)

# bulk transfer; the reader announces freed space only past half a ring
data = random.Random(1).randbytes(8 << 20)
got = hashlib.sha256()
n = 0
sent = 0
while n < len(data):
    if sent < len(data):
        sent += web.sys_write(conn, data[sent:sent + 30_000])
    cluster.step()
    chunk = db.sys_read(peer, 1 << 20)
    got.update(chunk)
    n += len(chunk)
print("stream intact:", got.digest() == hashlib.sha256(data).digest(),
      "| SpaceUpdates:", db.channels[peer].space_updates)

web.sys_close(conn)
print("db sees end of stream:", db.sys_read(peer) == b"")
db.sys_close(peer)

# the same API with real threads and a TCP loopback fabric underneath
live = Cluster(2, backend="loopback")
a, b = live.add_pod("node0", "10.9.0.1"), live.add_pod("node1", "10.9.1.1")
b.sys_listen(80)
live.start()
h = a.sys_connect(PodAddr("10.9.1.1", 80))
s = b.sys_accept(80)
t = threading.Thread(target=lambda: (a.sys_write_all(h, data[:1 << 20]), a.sys_close(h)))
t.start()
received = bytearray()
while chunk := b.sys_read(s):
    received += chunk
t.join()
print("loopback transfer intact:", bytes(received) == data[:1 << 20])
live.stop()
