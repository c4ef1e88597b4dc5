"""Simulated PCIe-over-Ethernet fabric.

A device is attached to at most one node. Attach and detach operations
aimed at the same node share one queue and run back to back; operations on
different nodes overlap freely. Times are integer milliseconds.
"""

from __future__ import annotations

from .model import ClusterConfig, LatencyParams, to_ms


class FabricError(RuntimeError):
    pass


class FabricState:
    def __init__(self, cluster: ClusterConfig, params: LatencyParams | None = None):
        self.cluster = cluster
        self.params = params or cluster.fabric_params
        self._nodes = {n.id for n in cluster.nodes}
        self._devices = {d.id for d in cluster.pool}
        self._attached: dict[str, str] = {}  # device -> node, insertion = attach order
        self._busy_until: dict[str, int] = {n: 0 for n in self._nodes}
        self._attach_ms = to_ms(self.params.attach_s)
        self._detach_ms = to_ms(self.params.detach_s)

    def _check(self, device_id: str, node_id: str) -> None:
        if device_id not in self._devices:
            raise FabricError(f"unknown device {device_id!r}")
        if node_id not in self._nodes:
            raise FabricError(f"unknown node {node_id!r}")

    def _enqueue(self, node_id: str, now_ms: int, cost_ms: int) -> int:
        done = max(now_ms, self._busy_until[node_id]) + cost_ms
        self._busy_until[node_id] = done
        return done

    def attach(self, device_id: str, node_id: str, now_ms: int) -> int:
        """Attach a pool device to a node; returns the completion time."""
        self._check(device_id, node_id)
        if device_id in self._attached:
            raise FabricError(f"{device_id} already attached to {self._attached[device_id]}")
        self._attached[device_id] = node_id
        return self._enqueue(node_id, now_ms, self._attach_ms)

    def detach(self, device_id: str, node_id: str, now_ms: int) -> int:
        self._check(device_id, node_id)
        owner = self._attached.get(device_id)
        if owner != node_id:
            where = "not attached" if owner is None else f"attached to {owner}"
            raise FabricError(f"cannot detach {device_id} from {node_id}: {where}")
        del self._attached[device_id]
        return self._enqueue(node_id, now_ms, self._detach_ms)

    def attachments_of(self, node_id: str) -> list[str]:
        if node_id not in self._nodes:
            raise FabricError(f"unknown node {node_id!r}")
        return [d for d, n in self._attached.items() if n == node_id]

    def attached_to(self, device_id: str) -> str | None:
        return self._attached.get(device_id)

    def free_devices(self) -> list[str]:
        return [d.id for d in self.cluster.pool if d.id not in self._attached]

    def attached_count(self) -> int:
        return len(self._attached)

    def effective_bandwidth(self, local_gbps: float) -> float:
        """Host-to-device bandwidth seen through the fabric."""
        if not local_gbps > 0:
            raise FabricError("local bandwidth must be positive")
        return local_gbps * self.params.bandwidth_ratio

    def snapshot(self) -> dict[str, str]:
        return dict(self._attached)
