import random
from fractions import Fraction

import pytest

from helpers import perf_dump
from qbench.parsers import PerfSample, parse_perf_script
from qbench.perfcat import (
    Category,
    Rule,
    RuleError,
    categorize_sample,
    categorize_symbol,
    category_breakdown,
    load_rules,
    parse_rules,
    shipped_rules,
)

SENDM = parse_rules("prefix\tsendm\tPacketIO\n")


def test_one_rule(tmp_path):
    f = tmp_path / "x.rules"
    f.write_text("# comment\nprefix\tsendm\tPacketIO\n")
    rules = load_rules(f)
    assert rules.rules == (Rule("prefix", "sendm", Category.PACKET_IO),)
    assert rules.implementation == "x"


def test_unknown_category_rejected_with_line():
    with pytest.raises(RuleError) as err:
        parse_rules("prefix\tsendm\tPacketIO\nexact\tfoo\tNetworking\n")
    assert err.value.line == 2 and "Networking" in str(err.value)


def test_bad_regex_rejected_with_line():
    with pytest.raises(RuleError) as err:
        parse_rules("\n\nregex\t([a-z\tCrypto\n")
    assert err.value.line == 3


def test_malformed_line():
    with pytest.raises(RuleError):
        parse_rules("prefix sendm PacketIO\n")


def test_empty_file_everything_uncategorized(tmp_path):
    f = tmp_path / "empty.rules"
    f.write_text("")
    rules = load_rules(f)
    assert rules.rules == () and categorize_symbol("sendmsg", rules) is Category.UNCATEGORIZED


def test_categorize_examples():
    assert categorize_symbol("sendmsg", SENDM) is Category.PACKET_IO
    assert categorize_symbol("totally_novel_fn", parse_rules("")) is Category.UNCATEGORIZED
    assert categorize_symbol("aead_seal", parse_rules("prefix\taead\tCrypto\n")) is Category.CRYPTO
    assert categorize_symbol("[unknown]", parse_rules("regex\t.*\tCrypto\n")) is Category.UNCATEGORIZED


def test_matchers():
    rules = parse_rules("exact\tread\tFileIO\nregex\t^aes_.*_gcm\tCrypto\n")
    assert categorize_symbol("read", rules) is Category.FILE_IO
    assert categorize_symbol("readv", rules) is Category.UNCATEGORIZED
    assert categorize_symbol("aes_128_gcm", rules) is Category.CRYPTO


def test_first_match_wins_order_matters():
    # regression: overlapping rules give different answers when permuted
    a = parse_rules("prefix\tquiche::crypto\tCrypto\nprefix\tquiche::\tConnectionManagement\n")
    b = parse_rules("prefix\tquiche::\tConnectionManagement\nprefix\tquiche::crypto\tCrypto\n")
    sym = "quiche::crypto::Seal::seal"
    assert categorize_symbol(sym, a) is Category.CRYPTO
    assert categorize_symbol(sym, b) is Category.CONNECTION_MANAGEMENT


def test_forty_sendmsg_of_hundred():
    samples = [("quiche-server", 7, ["sendmsg", "quiche::send"])] * 40 + [("quiche-server", 7, ["memcpy"])] * 35
    samples += [("swapper", 0, ["intel_idle"])] * 25
    b = category_breakdown(parse_perf_script(perf_dump(samples)), SENDM, "quiche")
    assert b.total_samples == 100 and b.matched_samples == 75
    assert b.fraction(Category.PACKET_IO) == Fraction(2, 5)
    assert float(b.fraction(Category.PACKET_IO)) == 0.40


def test_zero_samples():
    b = category_breakdown([], SENDM)
    assert b.empty and b.total_samples == 0
    assert all(f == 0 for f in b.fractions.values())


def test_only_foreign_processes():
    samples = parse_perf_script(perf_dump([("sshd", 1, ["sendmsg"])] * 100))
    b = category_breakdown(samples, SENDM, "quiche")
    assert (b.matched_samples, b.total_samples) == (0, 100)


def test_chain_scan_option():
    s = PerfSample("srv", 1, "memcpy", ("memcpy", "sendmsg", "main"))
    assert categorize_sample(s, SENDM) is Category.UNCATEGORIZED
    assert categorize_sample(s, SENDM, scan_chain=True) is Category.PACKET_IO


def test_shipped_rule_files_load():
    assert {"lsquic", "quiche"} <= set(shipped_rules())
    for name in shipped_rules():
        rules = load_rules(name)
        assert len(rules.rules) > 50 and len(rules.source_digest) == 64
        assert categorize_symbol("sendmsg", rules) is Category.PACKET_IO
        assert categorize_symbol("aead_seal", rules) is Category.CRYPTO


def test_missing_rule_file():
    with pytest.raises(FileNotFoundError):
        load_rules("no-such-stack")


# -- properties over random rule and sample sets ----------------------------------

SYMBOLS = ["sendmsg", "recvmsg", "sendmmsg", "aead_seal", "aes_gcm_enc", "memcpy", "read", "pread64",
           "lsquic_conn_tick", "quiche::Connection::send", "[unknown]", "intel_idle", "udp_sendmsg", "vfs_read"]
PATTERNS = ["send", "recv", "aes", "aead", "mem", "read", "lsquic_", "quiche::", "udp_", "vfs_", "intel", "x"]


def random_rules(rng):
    lines = []
    for _ in range(rng.randint(0, 8)):
        m = rng.choice(["exact", "prefix", "regex"])
        pat = rng.choice(SYMBOLS if m == "exact" else PATTERNS)
        if m == "regex":
            pat = rng.choice(["^", ""]) + pat + rng.choice([".*", "", "$"])
        lines.append(f"{m}\t{pat}\t{rng.choice(list(Category)).value}")
    return parse_rules("\n".join(lines))


def random_samples(rng):
    out = []
    for _ in range(rng.randint(0, 60)):
        comm = rng.choice(["quiche-server", "lsquic_client", "sshd", "swapper"])
        chain = tuple(rng.choice(SYMBOLS) for _ in range(rng.randint(1, 4)))
        out.append(PerfSample(comm, rng.randint(0, 9), chain[0], chain))
    return out


def check_breakdown_laws(rng):
    rules = random_rules(rng)
    samples = random_samples(rng)
    flt = rng.choice(["", "quiche|lsquic", "sshd", "nomatch"])
    scan = rng.random() < 0.5
    b = category_breakdown(samples, rules, flt, scan)
    assert sum(b.counts.values()) == b.matched_samples
    assert sum(b.fractions.values()) == (Fraction(b.matched_samples, b.total_samples) if b.total_samples else 0)
    extra = Rule(rng.choice(["exact", "prefix"]), rng.choice(SYMBOLS + PATTERNS), rng.choice(list(Category)))
    b2 = category_breakdown(samples, rules.extended(extra), flt, scan)
    assert b2.matched_samples >= b.matched_samples
    assert b2.categorized_samples >= b.categorized_samples
    return True


def test_breakdown_laws_1e3_random_sets():
    rng = random.Random(1234)
    assert all(check_breakdown_laws(rng) for _ in range(1000))
