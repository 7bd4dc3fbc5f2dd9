"""Deterministic fixture generation: engineered traces, drop schedules, solar curves.

Fixtures are committed AND regenerable from the manifest; `--check` verifies
that the committed files match what the manifest produces byte for byte.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .analysis import round2
from .simcore import RandomStream


class FixtureError(ValueError):
    pass


def drop_count_for_uptime(total_slots: int, uptime_target_pct: float) -> int:
    """Smallest drop count whose distinct-slot uptime rounds to the target."""
    if uptime_target_pct > 100.0 or uptime_target_pct < 0.0:
        raise FixtureError(f"uptime target {uptime_target_pct} is outside [0, 100]")
    for drops in range(total_slots + 1):
        if round2(100.0 * (total_slots - drops) / total_slots) == uptime_target_pct:
            return drops
    raise FixtureError(f"no drop count yields uptime {uptime_target_pct} over {total_slots} slots")


def _pick_distinct(rng: RandomStream, candidates: list[int], count: int) -> list[int]:
    # partial Fisher-Yates over a copy; deterministic for a given stream
    pool = list(candidates)
    if count > len(pool):
        raise FixtureError(f"cannot pick {count} slots from {len(pool)} candidates")
    for i in range(count):
        j = rng.randint(i, len(pool) - 1)
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:count])


def integer_sum_for_mean(count: int, mean_target: float) -> int:
    """An integer total whose mean over `count` values rounds (half-up) to the target."""
    lo = math.ceil((mean_target - 0.005) * count)
    hi = math.floor((mean_target + 0.005) * count)
    for total in ((lo + hi) // 2, lo, hi):
        if round2(total / count) == mean_target:
            return total
    raise FixtureError(f"no integer sum over {count} values has mean {mean_target}")


def gen_drop_slots(entry: dict, rng: RandomStream) -> tuple[str, frozenset[int]]:
    total = entry["total_slots"]
    if "slots" in entry:
        slots = sorted(set(entry["slots"]))
        if any(not 0 <= s < total for s in slots):
            raise FixtureError(f"{entry['name']}: explicit slots outside [0, {total})")
    else:
        count = drop_count_for_uptime(total, entry["uptime_target_pct"])
        exclude = set(entry.get("exclude_slots", []))
        candidates = [s for s in range(total) if s not in exclude]
        slots = _pick_distinct(rng, candidates, count)
    lines = ["slot"] + [str(s) for s in slots]
    return "\n".join(lines) + "\n", frozenset(slots)


def gen_value_trace(entry: dict, rng: RandomStream) -> str:
    """Per-slot integer plateaus whose min / max / 2-decimal mean are exact.

    Each slot holds one constant value for its whole cadence window, so any
    in-slot sampling (including medians of repeated reads) reproduces the
    slot value without quantization error.
    """
    slots = entry["slots"]
    cadence = entry["cadence_ms"]
    min_value = entry["min_value"]
    max_value = entry["max_value"]
    fill_low = entry["fill_low"]
    fill_high = entry["fill_high"]
    if not min_value < fill_low <= fill_high < max_value:
        raise FixtureError(f"{entry['name']}: fill range must sit strictly inside min/max")
    min_slot = entry["min_slot"]
    max_slot = entry["max_slot"]
    for label, s in (("min_slot", min_slot), ("max_slot", max_slot)):
        if not 0 <= s < slots:
            raise FixtureError(f"{entry['name']}: {label} {s} out of range")
    if min_slot == max_slot:
        raise FixtureError(f"{entry['name']}: min_slot and max_slot must differ")

    target_sum = integer_sum_for_mean(slots, entry["mean_target"])
    fill_slots = [s for s in range(slots) if s not in (min_slot, max_slot)]
    values = {s: rng.randint(fill_low, fill_high) for s in fill_slots}
    values[min_slot] = min_value
    values[max_slot] = max_value
    diff = target_sum - min_value - max_value - sum(values[s] for s in fill_slots)
    while diff != 0:
        # spread the correction evenly; the fill bounds leave ample room
        per = max(1, abs(diff) // max(1, len(fill_slots)))
        progressed = False
        for s in fill_slots:
            if diff == 0:
                break
            v = values[s]
            if diff > 0:
                step = min(per, diff, (max_value - 1) - v)
            else:
                step = -min(per, -diff, v - min_value)
            if step:
                values[s] = v + step
                diff -= step
                progressed = True
        if not progressed:
            raise FixtureError(f"{entry['name']}: mean target {entry['mean_target']} infeasible")

    check = [values[s] for s in range(slots)]
    got = (min(check), max(check), round2(sum(check) / len(check)))
    want = (min_value, max_value, entry["mean_target"])
    if got != want:
        raise FixtureError(f"{entry['name']}: generated stats {got} != targets {want}")

    lines = ["time_ms,value"]
    for s in range(slots):
        start = s * cadence
        lines.append(f"{start},{values[s]}")
        lines.append(f"{start + cadence - 1},{values[s]}")
    return "\n".join(lines) + "\n"


def gen_solar(entry: dict) -> str:
    """Sinusoidal daytime charge current sampled on a fixed step."""
    days = entry["days"]
    peak = entry["peak_ma"]
    sunrise = entry.get("sunrise_hour", 6.0)
    sunset = entry.get("sunset_hour", 18.0)
    step_min = entry.get("step_minutes", 60)
    lines = ["time_ms,current_ma"]
    for minute in range(0, days * 24 * 60, step_min):
        hour = (minute / 60.0) % 24.0
        if sunrise <= hour < sunset:
            current = peak * math.sin(math.pi * (hour - sunrise) / (sunset - sunrise))
        else:
            current = 0.0
        lines.append(f"{minute * 60_000},{current:.1f}")
    return "\n".join(lines) + "\n"


def generate_fixtures(manifest_path: str | Path, check: bool = False) -> list[Path]:
    """Generate (or verify, with check=True) every fixture in the manifest."""
    manifest_path = Path(manifest_path)
    manifest = tomllib.loads(manifest_path.read_text())
    seed = manifest.get("seed", 0)
    out_base = manifest_path.parent
    entries = manifest.get("fixture", [])

    outputs: dict[Path, str] = {}
    for entry in entries:
        rng = RandomStream(seed, f"fixture:{entry['name']}")
        if entry["kind"] == "drop_slots":
            text, _ = gen_drop_slots(entry, rng)
            outputs[out_base / entry["out"]] = text
        elif entry["kind"] == "value_trace":
            outputs[out_base / entry["out"]] = gen_value_trace(entry, rng)
        elif entry["kind"] == "solar":
            outputs[out_base / entry["out"]] = gen_solar(entry)
        else:
            raise FixtureError(f"unknown fixture kind {entry['kind']!r}")

    written = []
    for path, text in outputs.items():
        if check:
            existing = path.read_text() if path.is_file() else None
            if existing != text:
                raise FixtureError(f"{path} does not match its manifest (regenerate it)")
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, newline="\n")
        written.append(path)
    return written


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="aqlogsim.fixtures", description="Generate or verify committed fixtures"
    )
    parser.add_argument("manifest", help="fixture manifest (TOML)")
    parser.add_argument("--check", action="store_true", help="verify instead of writing")
    args = parser.parse_args(argv)
    try:
        paths = generate_fixtures(args.manifest, check=args.check)
    except FixtureError as exc:
        print(f"fixture error: {exc}", file=sys.stderr)
        return 1
    verb = "verified" if args.check else "wrote"
    for p in paths:
        print(f"{verb} {p}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
