"""A set of nodes wired to one fabric, driven either step by step or by threads."""
from __future__ import annotations

import random

from ..transport import Fabric, LatencyModel, PodAddr, Registry, make_fabric
from .service import TsorService


class Cluster:
    """Deterministic by default: blocking client calls advance the cluster by
    calling :meth:`step`.  ``seed`` shuffles service order and how many
    transport messages each step delivers, which varies the interleaving of
    writes, reads and service work without losing reproducibility.  Call
    :meth:`start` to switch to one service thread per node instead."""

    def __init__(self, nodes: int | list[str] = 2, backend: str = "inproc", seed: int | None = None,
                 latency: LatencyModel | None = None, registry: Registry | None = None, **service_opts):
        names = [f"node{i}" for i in range(nodes)] if isinstance(nodes, int) else list(nodes)
        self.fabric: Fabric = make_fabric(backend, registry or Registry(), latency, seed or 0)
        self.services = {name: TsorService(name, self.fabric, **service_opts) for name in names}
        self.rng = random.Random(seed) if seed is not None else None
        self.threaded = False
        self.steps = 0

    @property
    def registry(self) -> Registry:
        return self.fabric.registry

    def add_pod(self, node: str, ip: str):
        client = self.services[node].register_client(PodAddr(ip, 0))
        if not self.threaded:
            client.driver = self.step
        return client

    def step(self) -> bool:
        self.steps += 1
        order = list(self.services.values())
        budget = None
        if self.rng is not None:
            self.rng.shuffle(order)
            budget = self.rng.randint(1, 8)
        work = False
        for svc in order:
            work |= svc.service_step()
        if not self.threaded:
            work |= self.fabric.pump(budget) > 0
        return work

    def run_until_idle(self, max_steps: int = 1_000_000) -> int:
        for n in range(max_steps):
            if not self.step() and not self.fabric.pending:
                return n
        raise RuntimeError("cluster did not go idle")

    def start(self) -> None:
        self.threaded = True
        for svc in self.services.values():
            for client in svc.clients:
                client.driver = None
        self.fabric.start()
        for svc in self.services.values():
            svc.start()

    def stop(self) -> None:
        for svc in self.services.values():
            svc.stop()
        self.fabric.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()

    @property
    def cross_node_messages(self) -> int:
        return self.fabric.cross_node_messages

    @property
    def connection_creations(self) -> int:
        return sum(self.fabric.creations.values())
