from __future__ import annotations

import csv
import ipaddress
import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).parent
sys.path.insert(0, str(TESTS))

FIXTURES = TESTS / "fixtures"


def load_ldns_pairs() -> list[dict]:
    with (FIXTURES / "ldns_pairs.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        assert ipaddress.ip_address(row["client_ip"]) in ipaddress.ip_network(row["client_prefix"])
        row["self_resolved"] = row["self_resolved"] == "true"
    return rows


@pytest.fixture
def ldns_pairs() -> list[dict]:
    return load_ldns_pairs()
