from __future__ import annotations

import pytest

from entityfocus.corpus import Entity, Passage, QueryExample, corpus_lookup
from entityfocus.sparse import build_index


@pytest.fixture
def helpful_entity_fixture():
    """Appending "bell pepper" lifts the only answer passage from absent to rank 1."""
    passages = [
        Passage("n1", "what is shown here"),
        Passage("n2", "what is shown"),
        Passage("n3", "shown here today"),
        Passage("n4", "here is what we saw"),
        Passage("n5", "what a view is shown"),
        Passage("a1", "bell pepper belongs to genus capsicum"),
        Passage("z1", "a quiet dog"),
    ]
    query = QueryExample(
        "q1",
        "what is shown here",
        ("capsicum",),
        "",
        (Entity("bell pepper", "tag"), Entity("zebra crossing", "tag")),
    )
    return build_index(passages), corpus_lookup(passages), query


@pytest.fixture
def distractor_entity_fixture():
    """Appending "red barn" pushes the answer passage from rank 1 to rank 2."""
    passages = [
        Passage("a1", "a capsicum shown in a pot"),
        Passage("d1", "old red barn shown at dusk on a hill"),
        Passage("n1", "a long day"),
        Passage("n2", "nothing to see"),
        Passage("n3", "a long road"),
    ]
    query = QueryExample("q2", "what is shown here", ("capsicum",), "", (Entity("red barn", "tag"),))
    return build_index(passages), corpus_lookup(passages), query


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(results):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} -- {detail}")
