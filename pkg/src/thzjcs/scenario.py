"""Vehicles, topologies, planar geometry and topology sources."""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .channel import AntennaPattern, dbm_to_watts

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
MIN_SPACING = 1.0
DEFAULT_TX_POWER = float(dbm_to_watts(40.0))


class Role(str, enum.Enum):
    SPV = "spv"
    COMM = "comm"
    SENSE = "sense"


class Lobe(enum.Enum):
    MAIN = "main"
    SIDE = "side"


class GeometryError(ValueError):
    pass


class TopologyError(ValueError):
    pass


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class Vehicle:
    id: int
    role: Role
    position: tuple[float, float]
    heading: float = 0.0
    tx_power: float = 0.0
    antenna: AntennaPattern = field(default_factory=AntennaPattern)

    def __post_init__(self):
        if not 0.0 <= self.heading < 2.0 * math.pi:
            raise TopologyError(f"vehicle {self.id}: heading {self.heading!r} not in [0, 2pi)")
        if self.role is Role.SPV and not self.tx_power > 0:
            raise TopologyError(f"SPV {self.id} needs positive tx_power")


@dataclass(frozen=True)
class SensingParams:
    rcs: float = 1.0
    min_sensing_sinr: float = 10 ** 0.3  # 3 dB

    def __post_init__(self):
        if not self.rcs > 0:
            raise ValueError("rcs must be positive")
        if not self.min_sensing_sinr > 0:
            raise ValueError("min_sensing_sinr must be positive")


@dataclass(frozen=True)
class Topology:
    """One static snapshot; the unit of a decision instance.

    Vehicles keep their given order. Targets are indexed comm first, then
    sensing, which is the column order of the node features and GNN outputs.
    """

    vehicles: tuple[Vehicle, ...]
    region: tuple[float, float] = (100.0, 100.0)

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        w, h = self.region
        pos = self.positions
        if len({v.id for v in self.vehicles}) != len(self.vehicles):
            raise TopologyError("duplicate vehicle ids")
        if len(pos) and (np.any(pos < 0) or np.any(pos[:, 0] > w) or np.any(pos[:, 1] > h)):
            raise TopologyError("vehicle outside region")
        if not self.spvs:
            raise TopologyError("topology needs at least one SPV")
        if self.n_targets < 1:
            raise TopologyError("topology needs at least one target")
        d = pairwise_distances(pos)
        np.fill_diagonal(d, np.inf)
        if d.min() < MIN_SPACING - 1e-9:
            raise TopologyError(f"vehicles closer than {MIN_SPACING} m")

    @property
    def positions(self) -> np.ndarray:
        return np.array([v.position for v in self.vehicles], dtype=float).reshape(-1, 2)

    def _indices(self, role):
        return [i for i, v in enumerate(self.vehicles) if v.role is role]

    @property
    def spvs(self) -> list[int]:
        return self._indices(Role.SPV)

    @property
    def comm(self) -> list[int]:
        return self._indices(Role.COMM)

    @property
    def sense(self) -> list[int]:
        return self._indices(Role.SENSE)

    @property
    def targets(self) -> list[int]:
        return self.comm + self.sense

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.spvs), len(self.comm), len(self.sense)

    @property
    def n_targets(self) -> int:
        return len(self.comm) + len(self.sense)

    def to_dict(self) -> dict:
        return {
            "schema": "thzjcs.topology/1",
            "region_m": list(self.region),
            "vehicles": [
                {
                    "id": v.id,
                    "role": v.role.value,
                    "position_m": list(v.position),
                    "heading_rad": v.heading,
                    "tx_power_w": v.tx_power,
                    "antenna": {
                        "horizontal_beamwidth_rad": v.antenna.horizontal_beamwidth,
                        "vertical_beamwidth_rad": v.antenna.vertical_beamwidth,
                        "sidelobe_power_ratio": v.antenna.sidelobe_power_ratio,
                    },
                }
                for v in self.vehicles
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        vehicles = []
        for v in d["vehicles"]:
            a = v["antenna"]
            vehicles.append(Vehicle(
                id=int(v["id"]),
                role=Role(v["role"]),
                position=(float(v["position_m"][0]), float(v["position_m"][1])),
                heading=float(v["heading_rad"]),
                tx_power=float(v["tx_power_w"]),
                antenna=AntennaPattern(a["horizontal_beamwidth_rad"], a["vertical_beamwidth_rad"],
                                       a["sidelobe_power_ratio"]),
            ))
        return cls(tuple(vehicles), tuple(float(x) for x in d["region_m"]))


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def planar_angle(origin, toward, probe) -> float:
    """Unsigned angle at ``origin`` between the rays to ``toward`` and ``probe``."""
    ox, oy = origin
    ax, ay = toward[0] - ox, toward[1] - oy
    bx, by = probe[0] - ox, probe[1] - oy
    return abs(math.atan2(ax * by - ay * bx, ax * bx + ay * by))


def lobe_class(tx: Vehicle, boresight_target, probe) -> Lobe:
    """Main lobe iff the probe is within half the horizontal beamwidth of boresight."""
    if tuple(boresight_target) == tuple(tx.position):
        raise GeometryError("boresight target coincides with the transmitter")
    if tuple(probe) == tuple(tx.position):
        raise GeometryError("probe coincides with the transmitter")
    angle = planar_angle(tx.position, boresight_target, probe)
    half = tx.antenna.horizontal_beamwidth / 2.0
    return Lobe.MAIN if angle <= half + 1e-12 else Lobe.SIDE


def los_blocker_count(topology: Topology, v: int, m: int, blocker_radius: float = 1.0) -> int:
    """SPVs (other than v and m) obstructing the straight segment v -> m.

    ``v`` and ``m`` are vehicle indices into ``topology.vehicles``.
    """
    if v == m:
        raise GeometryError("blocker count needs two distinct vehicles")
    pos = topology.positions
    a, b = pos[v], pos[m]
    seg = b - a
    seg_len2 = float(seg @ seg)
    count = 0
    for i in topology.spvs:
        if i == v or i == m:
            continue
        t = float((pos[i] - a) @ seg) / seg_len2
        if not 0.0 < t < 1.0:
            continue
        foot = a + t * seg
        if float(np.hypot(*(pos[i] - foot))) < blocker_radius:
            count += 1
    return count


def beam_blocker_count(topology: Topology, v: int, m: int) -> int:
    """SPVs (other than v and m) inside v's main-lobe cone toward m, no farther than m."""
    if v == m:
        raise GeometryError("blocker count needs two distinct vehicles")
    pos = topology.positions
    tx = topology.vehicles[v]
    d_vm = float(np.hypot(*(pos[m] - pos[v])))
    count = 0
    for i in topology.spvs:
        if i == v or i == m:
            continue
        if float(np.hypot(*(pos[i] - pos[v]))) > d_vm:
            continue
        if lobe_class(tx, pos[m], pos[i]) is Lobe.MAIN:
            count += 1
    return count


def generate_topology(seed, region=(100.0, 100.0), counts=(5, 2, 2), spacing=MIN_SPACING,
                      tx_power=DEFAULT_TX_POWER, antenna: AntennaPattern | None = None,
                      max_tries: int = 10_000) -> Topology:
    """Uniform random placement with rejection for the spacing constraint."""
    antenna = antenna or AntennaPattern()
    rng = np.random.default_rng(seed)
    n_spv, n_comm, n_sense = counts
    roles = [Role.SPV] * n_spv + [Role.COMM] * n_comm + [Role.SENSE] * n_sense
    w, h = region
    placed: list[np.ndarray] = []
    tries = 0
    while len(placed) < len(roles):
        tries += 1
        if tries > max_tries:
            raise TopologyError(
                f"could not place {len(roles)} vehicles in {w}x{h} m at spacing {spacing} m"
            )
        p = rng.uniform((0.0, 0.0), (w, h))
        if all(np.hypot(*(p - q)) >= spacing for q in placed):
            placed.append(p)
    headings = rng.uniform(0.0, 2.0 * math.pi, size=len(roles))
    vehicles = tuple(
        Vehicle(id=i, role=r, position=(float(p[0]), float(p[1])),
                heading=float(hd) % (2.0 * math.pi),
                tx_power=tx_power if r is Role.SPV else 0.0, antenna=antenna)
        for i, (r, p, hd) in enumerate(zip(roles, placed, headings))
    )
    return Topology(vehicles, (float(w), float(h)))


@dataclass(frozen=True)
class GeoFrame:
    """Maps lat/lon onto the local region; (origin_lat, origin_lon) is the region corner."""

    origin_lat: float
    origin_lon: float
    width: float = 100.0
    height: float = 100.0

    def project(self, lat: float, lon: float) -> tuple[float, float]:
        x = math.radians(lon - self.origin_lon) * EARTH_RADIUS_M * math.cos(math.radians(self.origin_lat))
        y = math.radians(lat - self.origin_lat) * EARTH_RADIUS_M
        return x, y

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.width and 0.0 <= y <= self.height


def _parse_timestamp(raw: str) -> float:
    raw = raw.strip()
    try:
        return float(raw)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(raw).timestamp()
    except ValueError:
        # 3.10 fromisoformat wants exactly 3 or 6 fractional digits
        return datetime.strptime(raw.replace(" ", "T"), "%Y-%m-%dT%H:%M:%S.%f").timestamp()


def ingest_gps_csv(path, frame: GeoFrame, counts=(5, 2, 2), tx_power=DEFAULT_TX_POWER,
                   antenna: AntennaPattern | None = None, bucket_s: float = 1.0) -> list[Topology]:
    """Turn an ``id,timestamp,lat,lon`` trace into one topology per time bucket.

    Roles cycle through the configured counts in record order. Rows outside
    the region are dropped; rows violating the spacing rule are dropped with
    a warning. Buckets that cannot form a valid topology are skipped.
    """
    antenna = antenna or AntennaPattern()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames
    if not rows:
        return []
    missing = {"id", "timestamp", "lat", "lon"} - set(header or ())
    if missing:
        raise TraceError(f"{path}: missing columns {sorted(missing)}")

    buckets: dict[int, dict[int, tuple[float, float]]] = {}
    bad = 0
    for lineno, row in enumerate(rows, start=2):
        try:
            vid = int(row["id"])
            ts = _parse_timestamp(row["timestamp"])
            lat, lon = float(row["lat"]), float(row["lon"])
            if not (math.isfinite(lat) and math.isfinite(lon)):
                raise ValueError("non-finite coordinate")
        except (TypeError, ValueError, KeyError) as exc:
            bad += 1
            log.warning("%s:%d: malformed row skipped (%s)", path, lineno, exc)
            continue
        x, y = frame.project(lat, lon)
        if not frame.contains(x, y):
            continue
        bucket = buckets.setdefault(int(math.floor(ts / bucket_s)), {})
        if vid in bucket:
            log.warning("%s:%d: duplicate id %d in bucket, keeping last", path, lineno, vid)
            del bucket[vid]  # re-insert so record order follows the kept row
        bucket[vid] = (x, y)
    if bad * 2 > len(rows):
        raise TraceError(f"{path}: {bad} of {len(rows)} rows malformed")

    pattern = [Role.SPV] * counts[0] + [Role.COMM] * counts[1] + [Role.SENSE] * counts[2]
    topologies = []
    for key in sorted(buckets):
        vehicles: list[Vehicle] = []
        for vid, (x, y) in buckets[key].items():
            if any(math.hypot(x - v.position[0], y - v.position[1]) < MIN_SPACING for v in vehicles):
                log.warning("bucket %d: vehicle %d within %s m of another, dropped", key, vid, MIN_SPACING)
                continue
            role = pattern[len(vehicles) % len(pattern)]
            vehicles.append(Vehicle(vid, role, (x, y), 0.0,
                                    tx_power if role is Role.SPV else 0.0, antenna))
        try:
            topologies.append(Topology(tuple(vehicles), (frame.width, frame.height)))
        except TopologyError as exc:
            log.warning("bucket %d skipped: %s", key, exc)
    return topologies
