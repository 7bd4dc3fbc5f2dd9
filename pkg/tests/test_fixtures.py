"""Fixture generation: exact targets, regeneration stability, infeasible inputs."""

import pytest

from aqlogsim.analysis import channel_stats, round2
from aqlogsim.fixtures import (
    FixtureError,
    drop_count_for_uptime,
    gen_solar,
    gen_value_trace,
    generate_fixtures,
    integer_sum_for_mean,
)
from aqlogsim.simcore import RandomStream

from conftest import SCENARIO_DIR

MANIFEST = SCENARIO_DIR / "fixtures" / "manifest.toml"


class TestDropCounts:
    def test_central_workshop_needs_25_drops(self):
        assert drop_count_for_uptime(1440, 98.26) == 25

    def test_karakoram_needs_2_drops(self):
        assert drop_count_for_uptime(1440, 99.86) == 2

    def test_full_uptime_is_zero_drops(self):
        assert drop_count_for_uptime(1440, 100.0) == 0

    def test_impossible_targets_raise(self):
        with pytest.raises(FixtureError):
            drop_count_for_uptime(1440, 100.01)
        with pytest.raises(FixtureError):
            drop_count_for_uptime(4, 99.99)  # only 100/75/50/... reachable


class TestSumForMean:
    def test_table_row_sums_round_back(self):
        for count, mean in ((1440, 72.92), (1440, 81.25), (1415, 72.92)):
            total = integer_sum_for_mean(count, mean)
            assert round2(total / count) == mean

    def test_infeasible_mean(self):
        with pytest.raises(FixtureError):
            integer_sum_for_mean(1, 72.921)  # no integer rounds to this


class TestValueTrace:
    ENTRY = {
        "name": "t",
        "slots": 96,
        "cadence_ms": 900_000,
        "min_value": 2,
        "max_value": 297,
        "mean_target": 72.92,
        "fill_low": 20,
        "fill_high": 150,
        "min_slot": 5,
        "max_slot": 60,
    }

    def parse(self, text):
        rows = [line.split(",") for line in text.splitlines()[1:]]
        return [(int(t), int(v)) for t, v in rows]

    def test_targets_hit_exactly(self):
        text = gen_value_trace(dict(self.ENTRY), RandomStream(1, "x"))
        rows = self.parse(text)
        slot_values = [v for i, (_, v) in enumerate(rows) if i % 2 == 0]
        assert channel_stats(slot_values) == (2, 297, 72.92)

    def test_plateaus_cover_each_slot(self):
        text = gen_value_trace(dict(self.ENTRY), RandomStream(1, "x"))
        rows = self.parse(text)
        assert len(rows) == 2 * 96
        for k in range(96):
            t0, v0 = rows[2 * k]
            t1, v1 = rows[2 * k + 1]
            assert (t0, t1) == (k * 900_000, k * 900_000 + 899_999)
            assert v0 == v1

    def test_same_stream_regenerates_identically(self):
        a = gen_value_trace(dict(self.ENTRY), RandomStream(1, "x"))
        b = gen_value_trace(dict(self.ENTRY), RandomStream(1, "x"))
        assert a == b

    def test_bad_fill_range_rejected(self):
        entry = dict(self.ENTRY, fill_low=1)
        with pytest.raises(FixtureError):
            gen_value_trace(entry, RandomStream(1, "x"))


def test_solar_curve_shape():
    text = gen_solar({"name": "s", "days": 1, "peak_ma": 250.0})
    rows = [line.split(",") for line in text.splitlines()[1:]]
    by_hour = {int(t) // 3_600_000: float(ma) for t, ma in rows}
    assert by_hour[0] == 0.0
    assert by_hour[5] == 0.0
    assert by_hour[12] == 250.0  # solar noon
    assert by_hour[18] == 0.0
    assert all(ma >= 0 for ma in by_hour.values())


class TestManifest:
    def test_committed_fixtures_match_manifest(self):
        # regeneration in --check mode proves provenance of the committed files
        generate_fixtures(MANIFEST, check=True)

    def test_drop_schedules_have_documented_counts(self):
        drops_cw = (SCENARIO_DIR / "fixtures" / "drops_central_workshop.csv").read_text()
        drops_k = (SCENARIO_DIR / "fixtures" / "drops_karakoram.csv").read_text()
        assert len(drops_cw.strip().splitlines()) - 1 == 25
        assert [int(x) for x in drops_k.strip().splitlines()[1:]] == [712, 1203]

    def test_committed_traces_hit_table_rows(self):
        for name, want in (
            ("central_workshop_pm25.csv", (2, 297, 72.92)),
            ("karakoram_pm25.csv", (2, 1036, 81.25)),
        ):
            rows = (SCENARIO_DIR / "fixtures" / name).read_text().splitlines()[1:]
            slot_values = [int(r.split(",")[1]) for r in rows[0::2]]
            assert channel_stats(slot_values) == want

    def test_empty_manifest_writes_nothing(self, tmp_path):
        manifest = tmp_path / "empty.toml"
        manifest.write_text("schema_version = 1\nseed = 1\n")
        assert generate_fixtures(manifest) == []

    def test_check_detects_a_stale_fixture(self, tmp_path):
        manifest = tmp_path / "m.toml"
        manifest.write_text(
            "schema_version = 1\nseed = 5\n\n[[fixture]]\nname = \"d\"\nkind = \"drop_slots\"\n"
            "out = \"d.csv\"\ntotal_slots = 100\nuptime_target_pct = 98.0\n"
        )
        generate_fixtures(manifest)
        (tmp_path / "d.csv").write_text("slot\n1\n")
        with pytest.raises(FixtureError):
            generate_fixtures(manifest, check=True)
