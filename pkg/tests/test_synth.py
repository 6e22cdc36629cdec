import pytest

from schema_dst.data import dialogue_to_json, iter_user_frames
from schema_dst.features import Featurizer, Task, gold_turn_contexts
from schema_dst.synth import SERVICE_POOL, SynthConfig, render, synth_corpus, synth_schemas
from schema_dst.tokenization import WordTokenizer


@pytest.fixture(scope="module")
def default_corpus():
    return synth_corpus(SynthConfig())


def test_render_spans():
    text, spans = render("From {a} to {b}.", {"a": ("from_location", "Reno"), "b": ("to_location", "San Diego")})
    assert text == "From Reno to San Diego."
    assert [(s.slot, text[s.start : s.exclusive_end]) for s in spans] == [
        ("from_location", "Reno"),
        ("to_location", "San Diego"),
    ]


def test_same_config_same_corpus():
    a = synth_corpus(SynthConfig(n_dialogues=10, seed=4))
    b = synth_corpus(SynthConfig(n_dialogues=10, seed=4))
    c = synth_corpus(SynthConfig(n_dialogues=10, seed=5))
    assert [dialogue_to_json(d) for d in a[1]] == [dialogue_to_json(d) for d in b[1]]
    assert [dialogue_to_json(d) for d in a[1]] != [dialogue_to_json(d) for d in c[1]]


def test_zero_dialogues():
    schemas, dialogues = synth_corpus(SynthConfig(n_dialogues=0))
    assert dialogues == [] and len(schemas) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_services=0)
    with pytest.raises(ValueError):
        SynthConfig(n_services=len(SERVICE_POOL) + 1)
    with pytest.raises(ValueError):
        SynthConfig(n_dialogues=-1)


def test_schemas_are_distinct_domains():
    schemas = synth_schemas(len(SERVICE_POOL))
    assert len({s.domain for s in schemas}) == len(SERVICE_POOL)


def test_default_corpus_shape(default_corpus):
    schemas, dialogues = default_corpus
    assert len(dialogues) == 200 and len(schemas) == 2
    multi = sum(len(d.services) > 1 for d in dialogues)
    assert multi >= 100
    assert len({d.dialogue_id for d in dialogues}) == 200


def test_every_task_has_positives(default_corpus):
    schemas, dialogues = default_corpus
    index = {s.service_name: s for s in schemas}
    f = Featurizer(WordTokenizer.from_corpus(schemas, dialogues))
    for task in Task:
        exs = f.corpus_examples(task, dialogues, index)
        if task == Task.INTENT:
            positives = len(exs)
        elif task == Task.CATEGORICAL:
            positives = sum(ex.layout.candidate_ids[ex.target] != "[NULL]" for ex in exs)
        elif task == Task.FREEFORM:
            positives = sum(ex.target[0] != ex.layout.null_position for ex in exs)
        else:
            positives = sum(ex.target == 1 for ex in exs)
        assert positives >= 50, (task, positives)


def test_cross_domain_transfers_are_common(default_corpus):
    schemas, dialogues = default_corpus
    index = {s.service_name: s for s in schemas}
    f = Featurizer(WordTokenizer.from_corpus(schemas, dialogues))
    exs = f.corpus_examples(Task.CROSSDOMAIN, dialogues, index)
    with_transfer = {ex.provenance[0] for ex in exs if ex.target == 1}
    assert len(with_transfer) >= len(dialogues) / 10


def test_gold_states_follow_intent_rules(default_corpus):
    schemas, dialogues = default_corpus
    index = {s.service_name: s for s in schemas}
    for d in dialogues:
        for _, _, frame in iter_user_frames(d):
            st_ = frame.state
            if st_.active_intent == "NONE":
                assert st_.slot_values == {}
            else:
                allowed = index[frame.service].intent(st_.active_intent).allowed_slots
                assert set(st_.slot_values) <= allowed


def test_spans_match_state_values(default_corpus):
    _, dialogues = default_corpus
    for d in dialogues[:50]:
        for ctx in gold_turn_contexts(d):
            for sp in ctx.gold_frame.slot_spans:
                text = ctx.user_utterance[sp.start : sp.exclusive_end]
                assert ctx.gold_frame.state.value(sp.slot) == text
