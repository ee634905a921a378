import json
import threading
from functools import partial
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teleqlora.datapipe import (
    ChatSample,
    FetchError,
    ParseError,
    SourceConfig,
    apply_chat_template,
    build_samples,
    categorize,
    default_taxonomy,
    detokenize,
    encode_for_training,
    fetch_rfc,
    load_rules_config,
    load_samples,
    parse_rfc,
    prompt_prefix,
    render_back,
    save_samples,
    split_stratified,
    tokenize,
)
from teleqlora.datapipe.rfc import FOOTER_RE
from teleqlora.datapipe.tokenizer import EOS_ID, UNK_ID

FIXTURES = Path(__file__).parent / "fixtures"

SYNTHETIC_RFC = """\



                                                          RFC:  9000




                        EXAMPLE FRAMEWORK PROTOCOL

                              January 2001



                                                               [Page i]
\x0c
January 2001                                          Example Framework



1.  INTRODUCTION

1.1  Overview

   This memo describes an example framework used to verify the parser.
   Lines in this paragraph are wrapped at arbitrary
   points and must be rejoined during parsing.

   A second paragraph follows after a blank line and mentions BGP route
   reflector deployments for flavor.

2.  BEHAVIOR

   The framework behaves deterministically with OSPF adjacency checks
   and link-state routing table comparisons across the routing domain.



Someone                                                         [Page 1]
"""


class _MirrorHandler(BaseHTTPRequestHandler):
    def __init__(self, docroot, *args, **kwargs):
        self.docroot = docroot
        super().__init__(*args, **kwargs)

    def do_GET(self):
        name = self.path.lstrip("/")
        target = self.docroot / name
        if name.endswith(".txt") and target.exists():
            body = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", "text/plain")
            self.end_headers()
            self.wfile.write(body)
        elif name == "rfc7.txt":
            self.send_response(200)
            self.send_header("Content-Type", "text/html")
            self.end_headers()
            self.wfile.write(b"<html><body>not a text rfc</body></html>")
        else:
            self.send_response(404)
            self.end_headers()

    def log_message(self, *args):
        pass


@pytest.fixture(scope="module")
def mirror_server():
    handler = partial(_MirrorHandler, FIXTURES / "mirror")
    server = HTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestFetch:
    def test_http_path_pattern(self, mirror_server, tmp_path):
        src = SourceConfig(base_url=mirror_server, cache_dir=str(tmp_path), request_delay_s=0.0)
        data = fetch_rfc(791, src)
        assert data == (FIXTURES / "mirror" / "rfc791.txt").read_bytes()
        assert (tmp_path / "rfc791.txt").read_bytes() == data

    def test_404_no_partial_file(self, mirror_server, tmp_path):
        src = SourceConfig(base_url=mirror_server, cache_dir=str(tmp_path), request_delay_s=0.0)
        with pytest.raises(FetchError, match=r"fetch failed \(404\)"):
            fetch_rfc(999999, src)
        assert not (tmp_path / "rfc999999.txt").exists()

    def test_html_content_rejected(self, mirror_server):
        src = SourceConfig(base_url=mirror_server, request_delay_s=0.0)
        with pytest.raises(FetchError, match="unexpected content type"):
            fetch_rfc(7, src)

    def test_local_mirror_identical_bytes(self):
        src = SourceConfig(mirror_dir=str(FIXTURES / "mirror"))
        assert fetch_rfc(793, src) == (FIXTURES / "mirror" / "rfc793.txt").read_bytes()

    def test_offline_cold_cache_errors(self, tmp_path):
        src = SourceConfig(offline=True, cache_dir=str(tmp_path))
        with pytest.raises(FetchError, match="offline"):
            fetch_rfc(791, src)

    def test_cache_hit_skips_network(self, tmp_path):
        (tmp_path / "rfc42.txt").write_bytes(b"cached content\n1.  X\n\n   body\n")
        src = SourceConfig(base_url="http://invalid.invalid", cache_dir=str(tmp_path))
        assert fetch_rfc(42, src) == b"cached content\n1.  X\n\n   body\n"

    def test_invalid_number(self):
        with pytest.raises(ValueError):
            fetch_rfc(0, SourceConfig())


class TestParse:
    def test_synthetic_two_top_sections(self):
        doc = parse_rfc(SYNTHETIC_RFC)
        numbers = [s.heading_number for s in doc.sections]
        assert numbers == ["1", "1.1", "2"]
        assert doc.number == 9000
        assert doc.title == "EXAMPLE FRAMEWORK PROTOCOL"

    def test_footers_and_headers_removed(self):
        doc = parse_rfc(SYNTHETIC_RFC)
        for section in doc.sections:
            assert not FOOTER_RE.search(section.body)
            assert "January 2001" not in section.body

    def test_reflow_joins_wrapped_lines(self):
        doc = parse_rfc(SYNTHETIC_RFC)
        body = doc.sections[1].body
        assert "wrapped at arbitrary points" in body
        assert body.count("\n\n") == 1  # two paragraphs

    def test_deep_heading_number(self):
        doc = parse_rfc("1.2.3 Sub-sub\n\n   Some body text here.\n")
        assert doc.sections[0].heading_number == "1.2.3"
        assert doc.sections[0].heading_text == "Sub-sub"

    def test_unstructured_document(self):
        with pytest.raises(ParseError, match="unstructured document") as exc:
            parse_rfc("just prose\nwith no numbered headings anywhere\n")
        assert "just prose" in exc.value.raw

    def test_golden_rfc791(self):
        raw = (FIXTURES / "mirror" / "rfc791.txt").read_text()
        doc = parse_rfc(raw)
        golden = json.loads((FIXTURES / "golden" / "rfc791_parsed.json").read_text())
        assert doc.number == golden["number"]
        assert doc.title == golden["title"]
        assert len(doc.sections) == len(golden["sections"])
        for section, want in zip(doc.sections, golden["sections"]):
            assert section.heading_number == want["heading_number"]
            assert section.heading_text == want["heading_text"]
            assert section.body == want["body"]

    def test_golden_rfc793(self):
        raw = (FIXTURES / "mirror" / "rfc793.txt").read_text()
        doc = parse_rfc(raw)
        golden = json.loads((FIXTURES / "golden" / "rfc793_parsed.json").read_text())
        got = [
            {"heading_number": s.heading_number, "heading_text": s.heading_text, "body": s.body}
            for s in doc.sections
        ]
        assert {"number": doc.number, "title": doc.title, "sections": got} == golden

    def test_no_footer_leakage_in_goldens(self):
        for name in ("rfc791_parsed.json", "rfc793_parsed.json"):
            golden = json.loads((FIXTURES / "golden" / name).read_text())
            for section in golden["sections"]:
                assert not FOOTER_RE.search(section["body"])

    def test_parser_idempotence(self):
        doc = parse_rfc((FIXTURES / "mirror" / "rfc791.txt").read_text())
        again = parse_rfc(render_back(doc), number=doc.number)
        assert [s.body for s in again.sections] == [s.body for s in doc.sections]
        assert [s.heading_number for s in again.sections] == [
            s.heading_number for s in doc.sections
        ]


class TestCategorize:
    def test_bgp_keywords(self):
        tax = default_taxonomy()
        slug = categorize("Routing policy", "Configure BGP with a route reflector.", tax)
        assert slug == "ip-routing-bgp"

    def test_no_keywords_returns_none(self):
        tax = default_taxonomy()
        assert categorize("Misc", "entirely unrelated prose about cooking pasta", tax) is None

    def test_tie_breaks_to_smaller_slug(self):
        tax = default_taxonomy()
        # one hit each for bss ("billing") and oss ("inventory"): bss < oss
        assert categorize("X", "billing and inventory", tax) == "bss"

    def test_word_boundaries(self):
        tax = default_taxonomy()
        # "ips" must not match inside "relationships"
        assert categorize("X", "relationships", tax) is None

    def test_taxonomy_size_enforced(self):
        with pytest.raises(ValueError):
            categorize("X", "y", default_taxonomy()[:5])


class TestBuildSamples:
    def test_two_rules_two_samples(self):
        doc = parse_rfc(SYNTHETIC_RFC)
        cats, rules = load_rules_config()
        samples = build_samples(doc, rules, cats)
        by_heading = [s for s in samples if "Overview" in s.input]
        assert len(by_heading) == 2
        assert {s.category for s in samples} <= {c.id for c in cats}

    def test_golden_rfc791_samples(self):
        cats, rules = load_rules_config()
        doc = parse_rfc((FIXTURES / "mirror" / "rfc791.txt").read_text())
        samples = build_samples(doc, rules, cats)
        golden = load_samples(FIXTURES / "golden" / "rfc791_samples.jsonl")
        assert [(s.input, s.output, s.category) for s in samples] == [
            (s.input, s.output, s.category) for s in golden
        ]

    def test_imported_jsonl_passes_schema(self, tmp_path):
        path = tmp_path / "sme.jsonl"
        path.write_text(
            json.dumps(
                {"input": "Explain QoS.", "output": "Queueing I say.", "category": "network-services-qos"}
            )
            + "\n"
        )
        samples = load_samples(path)
        assert samples[0].category == "network-services-qos"

    def test_schema_violation_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"input": "x", "output": "y", "category": "z"}\n{"input": "", "output": "y", "category": "z"}\n')
        with pytest.raises(ValueError, match="line 2"):
            load_samples(path)

    def test_save_load_roundtrip(self, tmp_path):
        samples = [ChatSample("a?", "b.", "mpls"), ChatSample("c?", "d.", "oss", text="t")]
        save_samples(tmp_path / "s.jsonl", samples)
        back = load_samples(tmp_path / "s.jsonl")
        assert [(s.input, s.output, s.category, s.text) for s in back] == [
            ("a?", "b.", "mpls", None),
            ("c?", "d.", "oss", "t"),
        ]


class TestTemplate:
    def test_exact_rendering(self):
        sample = ChatSample("What is BGP?", "A path-vector protocol.", "ip-routing-bgp")
        rendered = apply_chat_template(sample, "<|endoftext|>")
        assert rendered == (
            "<|system|>\nYou are a helpful telecom expert assistant.<|end|>\n"
            "<|user|>\nWhat is BGP?<|end|>\n"
            "<|assistant|>\nA path-vector protocol.<|end|>\n"
            "<|endoftext|>"
        )

    def test_control_tokens_pass_through(self):
        sample = ChatSample("x", "contains <|end|> inside", "mpls")
        rendered = apply_chat_template(sample, "<|endoftext|>")
        assert "contains <|end|> inside" in rendered
        assert rendered.count("<|end|>") == 4

    def test_ends_with_eos(self):
        sample = ChatSample("x", "y", "mpls")
        assert apply_chat_template(sample, "<|endoftext|>").endswith("<|end|>\n<|endoftext|>")

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            apply_chat_template(ChatSample("", "y", "mpls"), "<|eos|>")

    @given(
        st.text(min_size=1, max_size=60).filter(lambda s: "<|" not in s),
        st.text(min_size=1, max_size=60).filter(lambda s: "<|" not in s),
    )
    @settings(max_examples=150, deadline=None)
    def test_grammar_three_end_markers(self, inp, out):
        rendered = apply_chat_template(ChatSample(inp, out, "mpls"), "<|endoftext|>")
        assert rendered.count("<|end|>") == 3
        sys_i = rendered.index("<|system|>")
        usr_i = rendered.index("<|user|>")
        ast_i = rendered.index("<|assistant|>")
        assert sys_i < usr_i < ast_i
        assert rendered.endswith("<|endoftext|>")

    def test_encode_masks_response_and_eos_only(self):
        sample = ChatSample("Q?", "ANS", "mpls")
        ids, mask = encode_for_training(sample)
        assert ids[-1] == EOS_ID and mask[-1]
        masked_ids = [int(i) for i, m in zip(ids, mask) if m]
        assert bytes(masked_ids[:-1]).decode() == "ANS"
        prefix_len = len(tokenize(prompt_prefix("Q?")))
        assert not mask[:prefix_len].any()


class TestTokenizer:
    def test_empty_string(self):
        assert tokenize("") == []

    def test_single_ascii(self):
        assert tokenize("A") == [65]

    @given(st.text(max_size=200))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_identity(self, text):
        assert detokenize(tokenize(text)) == text

    def test_unknown_special_id(self):
        with pytest.raises(ValueError, match="unknown special id"):
            detokenize([65, 300])

    def test_known_specials_skipped(self):
        assert detokenize([72, 105, EOS_ID, UNK_ID]) == "Hi"


class TestSplit:
    def make(self, n_per_cat, cats):
        out = []
        for c in cats:
            for i in range(n_per_cat):
                out.append(ChatSample(f"q{c}{i}", f"a{c}{i}", c))
        return out

    def test_arithmetic(self):
        samples = self.make(10, [f"cat{i:02d}" for i in range(20)])
        train, test = split_stratified(samples, 0.2, seed=0)
        assert len(test) == 40 and len(train) == 160
        per_cat = {}
        for s in test:
            per_cat[s.category] = per_cat.get(s.category, 0) + 1
        assert all(v == 2 for v in per_cat.values())

    def test_singleton_goes_to_train(self):
        samples = self.make(5, ["a"]) + [ChatSample("solo", "x", "b")]
        train, test = split_stratified(samples, 0.4, seed=1)
        assert all(s.category != "b" for s in test)
        assert any(s.category == "b" for s in train)

    def test_seed_determinism(self):
        samples = self.make(7, ["a", "b", "c"])
        s1 = split_stratified(samples, 0.3, seed=5)
        s2 = split_stratified(samples, 0.3, seed=5)
        assert [x.input for x in s1[0]] == [x.input for x in s2[0]]
        assert [x.input for x in s1[1]] == [x.input for x in s2[1]]

    def test_partition_property(self):
        samples = self.make(9, ["a", "b", "c", "d"])
        train, test = split_stratified(samples, 0.25, seed=3)
        all_inputs = sorted(s.input for s in samples)
        assert sorted(s.input for s in train + test) == all_inputs
        assert not {s.input for s in train} & {s.input for s in test}

    def test_bad_frac(self):
        with pytest.raises(ValueError):
            split_stratified(self.make(2, ["a"]), 1.0, seed=0)

    def test_empty_input(self):
        with pytest.raises(ValueError, match="empty input"):
            split_stratified([], 0.5, seed=0)
