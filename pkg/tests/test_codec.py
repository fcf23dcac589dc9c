import itertools

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from mqttauth.codec import (
    Connack,
    Connect,
    DecodeError,
    Disconnect,
    EncodeError,
    Pingreq,
    Pingresp,
    Publish,
    Suback,
    Subscribe,
    UnderflowDecodeError,
    decode_packet,
    decode_remaining_length,
    encode_packet,
    encode_remaining_length,
    filter_covers,
    read_packet,
    topic_matches,
    validate_filter,
)

BOUNDARIES = [0, 127, 128, 16383, 16384, 2097151, 2097152, 268435455]


@pytest.mark.parametrize("n", BOUNDARIES + [321])
def test_remaining_length_matches_reference(n):
    enc = encode_remaining_length(n)
    assert enc == oracles.varint(n)
    assert decode_remaining_length(enc) == (n, len(enc))


def test_remaining_length_examples():
    assert encode_remaining_length(321) == bytes([0xC1, 0x02])
    assert decode_remaining_length(bytes([0xC1, 0x02])) == (321, 2)
    with pytest.raises(DecodeError):
        decode_remaining_length(bytes([0x80, 0x80, 0x80, 0x80, 0x01]))
    with pytest.raises(DecodeError):
        decode_remaining_length(bytes([0x80, 0x00]))  # overlong zero
    with pytest.raises(UnderflowDecodeError):
        decode_remaining_length(bytes([0x80]))
    for bad in (-1, 268435456):
        with pytest.raises(EncodeError):
            encode_remaining_length(bad)


def test_fixed_frames():
    assert encode_packet(Pingreq()) == bytes([0xC0, 0x00])
    assert decode_packet(bytes([0xC0, 0x00])) == Pingreq()
    assert encode_packet(Pingresp()) == bytes([0xD0, 0x00])
    assert encode_packet(Disconnect()) == bytes([0xE0, 0x00])
    assert encode_packet(Connack(5)) == bytes([0x20, 0x02, 0x00, 0x05])


@pytest.mark.parametrize("username,password", [
    (None, None), ("u", None), (None, b"secret"), ("u", b"p\x00q"),
])
def test_connect_matches_field_by_field_reference(username, password):
    pkt = Connect("c1", username, password, 60)
    assert encode_packet(pkt) == oracles.connect_frame("c1", username, password, 60)
    assert decode_packet(encode_packet(pkt)) == pkt


def test_connect_flags_without_credentials():
    frame = encode_packet(Connect("c1", keep_alive=60))
    assert frame[9] & 0xC0 == 0


def test_connect_errors():
    with pytest.raises(EncodeError):
        encode_packet(Connect(""))
    good = bytearray(encode_packet(Connect("c1")))
    bad_name = bytes(good).replace(b"MQTT", b"MQXX")
    with pytest.raises(DecodeError):
        decode_packet(bad_name)
    level = bytearray(good)
    level[8] = 3
    with pytest.raises(DecodeError):
        decode_packet(bytes(level))
    reserved = bytearray(good)
    reserved[9] |= 0x01
    with pytest.raises(DecodeError):
        decode_packet(bytes(reserved))


def test_publish_rejects_wildcards():
    for topic in ("a/+", "#", "a/#", "", "a\x00b"):
        with pytest.raises(EncodeError):
            encode_packet(Publish(topic))


def test_decoder_bounds():
    frame = encode_packet(Publish("a/b", b"xyz"))
    with pytest.raises(DecodeError):
        decode_packet(frame[:-1])
    with pytest.raises(DecodeError):
        decode_packet(frame + b"\x00")
    assert read_packet(frame[:-1]) is None
    pkt, used = read_packet(frame + encode_packet(Pingreq()))
    assert pkt == Publish("a/b", b"xyz") and used == len(frame)


def test_invalid_utf8_rejected():
    frame = bytearray(encode_packet(Publish("ab")))
    frame[4] = 0xFF
    with pytest.raises(DecodeError):
        decode_packet(bytes(frame))


def test_subscribe_flags_and_round_trip():
    pkt = Subscribe(7, (("a/+", 0), ("#", 0)))
    frame = encode_packet(pkt)
    assert frame[0] == 0x82
    assert decode_packet(frame) == pkt
    with pytest.raises(DecodeError):
        decode_packet(bytes([0x80]) + frame[1:])


# -- fuzzed round trips ----------------------------------------------------

segment = st.text(st.characters(blacklist_characters="+#/\x00",
                                blacklist_categories=("Cs",)), min_size=1, max_size=6)
topics = st.lists(segment, min_size=1, max_size=4).map("/".join)
filters = st.builds(
    lambda segs, hash_tail: "/".join(segs + (["#"] if hash_tail else [])),
    st.lists(st.one_of(segment, st.just("+")), min_size=1, max_size=4), st.booleans())
text = st.text(st.characters(blacklist_characters="\x00", blacklist_categories=("Cs",)),
               min_size=1, max_size=20)

packets = st.one_of(
    st.builds(Connect, text, st.one_of(st.none(), text), st.one_of(st.none(), st.binary()),
              st.integers(0, 65535), st.booleans()),
    st.builds(Connack, st.integers(1, 5)),
    st.builds(Connack, st.just(0), st.booleans()),
    st.builds(Publish, topics, st.binary(max_size=300)),
    st.builds(Subscribe, st.integers(1, 65535),
              st.lists(st.tuples(filters, st.just(0)), min_size=1, max_size=4).map(tuple)),
    st.builds(Suback, st.integers(1, 65535),
              st.lists(st.sampled_from([0, 0x80]), min_size=1, max_size=4).map(tuple)),
    st.just(Pingreq()), st.just(Pingresp()), st.just(Disconnect()),
)


@settings(max_examples=400)
@given(packets)
def test_round_trip_property(pkt):
    frame = encode_packet(pkt)
    assert decode_packet(frame) == pkt
    _, n = decode_remaining_length(frame, 1)
    assert len(frame) == 1 + n + decode_remaining_length(frame, 1)[0]


@given(st.binary(max_size=64))
def test_decoder_never_crashes(data):
    try:
        decode_packet(data)
    except DecodeError:
        pass


# -- topic matching --------------------------------------------------------

def corpus(alphabet="abc", max_segments=4):
    topics = ["/".join(p) for n in range(1, max_segments + 1)
              for p in itertools.product(alphabet, repeat=n)]
    plain = ["/".join(p) for n in range(1, max_segments + 1)
             for p in itertools.product(alphabet + "+", repeat=n)]
    hashed = ["/".join(p + ("#",)) for n in range(0, max_segments)
              for p in itertools.product(alphabet + "+", repeat=n)]
    return topics, plain + hashed


def test_topic_matches_examples():
    assert topic_matches("a/b", "a/b")
    assert topic_matches("a/+/c", "a/b/c")
    assert not topic_matches("a/+/c", "a/b/d")
    assert topic_matches("#", "x/y/z")
    assert topic_matches("a/#", "a")
    assert not topic_matches("a/+", "a")


def test_topic_matches_agrees_with_brute_force_small():
    topics, fs = corpus(max_segments=3)
    for f in fs:
        for t in topics:
            assert topic_matches(f, t) == oracles.brute_force_match(f, t), (f, t)


def test_filter_validation():
    for ok in ("#", "+", "a/+/#", "+/+"):
        validate_filter(ok)
    for bad in ("a/#/b", "a#", "a/b+", ""):
        with pytest.raises(ValueError):
            validate_filter(bad)


def test_filter_covers_is_subsumption():
    topics, fs = corpus(alphabet="ab", max_segments=3)
    for outer in fs:
        for inner in fs:
            semantic = all(topic_matches(outer, t) for t in topics if topic_matches(inner, t))
            if filter_covers(outer, inner):
                assert semantic, (outer, inner)
    assert filter_covers("a/#", "a/+/b")
    assert not filter_covers("a/+", "a/#")
    assert filter_covers("#", "+/+")
