from __future__ import annotations

import json

import pytest

from nel_scope import scenarios
from nel_scope.controller import Mode
from nel_scope.errors import ConfigError
from nel_scope.simulator import (
    ClientSpec,
    Event,
    Network,
    Scenario,
    Simulation,
    Topology,
    effective_rtt,
    load_json,
    run,
)

PNW = scenarios.PNW_CLIENT


def small(events, duration=120, mode=Mode.FIXED, **kw):
    return Scenario(
        name="t", duration=duration,
        controller=scenarios.controller(mode, **kw),
        pages={"img": ["https://img.neltest.com/corg1.png"]},
        events=events,
    )


class TestTopology:
    def test_effective_rtt_direct_and_gateway(self):
        topo = scenarios.topology()
        assert effective_rtt(topo, PNW, "francecentral") == 140
        assert effective_rtt(topo, PNW, "westus2", gateway="francecentral") == 140 + 135
        assert effective_rtt(topo, PNW, "francecentral", gateway="francecentral") == 140 + 2
        assert effective_rtt(topo, PNW, "westus2", outages=["westus2"]) is None

    def test_symmetric_lookup(self):
        topo = scenarios.topology()
        assert topo.rtt("westus2", "pnw") == topo.rtt("pnw", "westus2")

    def test_missing_pair_rejected(self):
        with pytest.raises(ConfigError):
            Topology(regions=scenarios.topology().regions, clients=(ClientSpec("1.1.1.1", "mars"),),
                     rtt_matrix=dict(scenarios.RTT_MS))

    def test_nonpositive_rtt_rejected(self):
        bad = dict(scenarios.RTT_MS)
        bad[("pnw", "westus2")] = 0
        with pytest.raises(ConfigError):
            Topology(scenarios.topology().regions, (ClientSpec(PNW, "pnw"),), bad)

    def test_dict_roundtrip(self):
        topo = scenarios.topology_c()
        assert Topology.from_dict(json.loads(json.dumps(topo.to_dict()))) == topo


class TestScenario:
    def test_events_stable_sorted(self):
        s = small([Event(5, "load_page", {"client": PNW, "page": "img"}),
                   Event(1, "set_outage", {"region": "westus2"}),
                   Event(5, "set_outage", {"region": "westus2", "on": False})])
        assert [(e.t, e.type) for e in s.events] == [(1, "set_outage"), (5, "load_page"), (5, "set_outage")]

    def test_every_expansion(self):
        obj = small([]).to_dict()
        obj["events"] = [{"t": 0, "type": "load_page", "every": 30, "until": 100,
                          "args": {"client": PNW, "page": "img"}}]
        s = Scenario.from_dict(obj)
        assert [e.t for e in s.events] == [0, 30, 60, 90]

    @pytest.mark.parametrize("event", [
        Event(0, "teleport", {}),
        Event(0, "load_page", {"client": PNW, "page": "missing"}),
        Event(0, "load_page", {"client": "9.9.9.9", "page": "img"}),
        Event(0, "set_outage", {"region": "mars"}),
    ])
    def test_validation(self, event):
        with pytest.raises(ConfigError):
            Simulation(small([event]), scenarios.topology())

    def test_builtin_files_match_builders(self, tmp_path):
        scenarios.write_builtin(tmp_path)
        for name in scenarios.BUILTIN:
            for kind in ("scenario", "topology"):
                shipped = load_json(scenarios.builtin_path(name, kind))
                assert shipped == load_json(tmp_path / f"{kind}_{name}.json"), (name, kind)

    def test_dict_roundtrip(self):
        s = scenarios.scenario_b()
        assert Scenario.from_dict(json.loads(json.dumps(s.to_dict()))).to_dict() == s.to_dict()


class TestRun:
    def test_events_precede_tick_at_same_time(self):
        # the page loaded at t=0 is uploaded by the t=0 tick
        res = run(small([Event(0, "load_page", {"client": PNW, "page": "img"})], duration=5), scenarios.topology())
        (rec,) = res.upload_records()
        assert rec.ts == 0 and rec.region_id == "westus2"

    def test_deterministic(self):
        a = run(scenarios.scenario_b(240), scenarios.topology(), seed=4)
        b = run(scenarios.scenario_b(240), scenarios.topology(), seed=4)
        assert a.records_jsonl() == b.records_jsonl()
        assert a.timeline_csv() == b.timeline_csv()

    def test_rotation_does_not_touch_scenario(self):
        s = scenarios.scenario_b(240)
        before = s.controller
        run(s, scenarios.topology())
        assert s.controller == before

    def test_transport_rtt_reflects_path(self):
        s = small([Event(0, "set_gateway", {"client": PNW, "gateway": "francecentral"}),
                   Event(0, "load_page", {"client": PNW, "page": "img"})], duration=5)
        (rec,) = run(s, scenarios.topology()).upload_records()
        assert rec.transport_rtt_ms == 140 + 135

    def test_outage_yields_timeout_report_elsewhere(self):
        s = small([Event(0, "load_page", {"client": PNW, "page": "img"}),
                   Event(30, "set_outage", {"region": "westus2"}),
                   Event(40, "load_page", {"client": PNW, "page": "img"})],
                  duration=200, failover_endpoints=1)
        res = run(s, scenarios.topology())
        types = [r.report.body.type for r in res.upload_records()]
        assert types == ["ok", "tcp.timed_out"]
        assert [r.region_id for r in res.upload_records()] == ["westus2", "northcentralus"]

    def test_dns_resolution_goes_through_associator(self):
        res = run(small([Event(0, "load_page", {"client": PNW, "page": "img"})], duration=5), scenarios.topology())
        qs = res.association_store.queries()
        assert {q.source_ip for q in qs} == {scenarios.PNW_LDNS}
        assert {q.qname for q in qs} >= {"img.neltest.com", "westus2.neltest.com"}

    def test_no_ldns_means_dns_failure(self):
        topo = scenarios.topology([ClientSpec(PNW, "pnw")], {})
        res = run(small([Event(0, "load_page", {"client": PNW, "page": "img"})], duration=5), topo)
        assert res.records == []

    def test_timeline_has_every_minute_and_region(self):
        res = run(scenarios.scenario_b(240), scenarios.topology())
        lines = res.timeline_csv().splitlines()
        assert lines[0] == "minute,region_id,median_rtt_ms,upload_count"
        assert len(lines) == 1 + 4 * 4

    def test_write(self, tmp_path):
        res = run(scenarios.scenario_b(120), scenarios.topology())
        names = sorted(p.name for p in res.write(tmp_path))
        assert names == ["associations.csv", "records.jsonl", "timeline.csv"]

    def test_network_state(self):
        net = Network(scenarios.topology())
        net.outages.add("southeastasia")
        assert net.effective_rtt(PNW, "southeastasia") is None
        with pytest.raises(ConfigError):
            net.effective_rtt(PNW, "mars")
