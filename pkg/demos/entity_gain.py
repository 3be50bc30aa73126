"""Show how one appended entity changes the sparse ranking for a question."""

from __future__ import annotations

from entityfocus.corpus import Entity, Passage, QueryExample, corpus_lookup
from entityfocus.mining import entity_gain
from entityfocus.sparse import build_index

passages = [
    Passage("n1", "what is shown here"),
    Passage("n2", "what is shown"),
    Passage("n3", "shown here today"),
    Passage("n4", "here is what we saw"),
    Passage("n5", "what a view is shown"),
    Passage("a1", "bell pepper belongs to genus capsicum"),
    Passage("d1", "old red barn shown at dusk on a hill"),
]
query = QueryExample(
    "q1", "what is shown here", ("capsicum",), "",
    (Entity("bell pepper", "tag"), Entity("red barn", "tag"), Entity("zebra crossing", "tag")),
)

if __name__ == "__main__":
    index, lookup = build_index(passages), corpus_lookup(passages)
    for ent in query.entities:
        g = entity_gain(index, lookup, query, ent, k=5, theta=0.8)
        print(f"{ent.text:15s} gain {g.gain:+.3f}  oracle={g.is_oracle}")
