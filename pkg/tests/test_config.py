import numpy as np
import pytest
from hitrack.config import ConfigMap, TrackerConfig
from hitrack.errors import ConfigError
from parametrization import Parametrization as P

SAMPLE = """\
# two branches
layer_names = fine, coarse
layer_cell_sizes = 4, 8

memory_capacity = 10  # small memory
use_motion = no
"""


@pytest.fixture
def empty_map() -> ConfigMap:
    return ConfigMap.new()


@pytest.fixture
def small_map() -> ConfigMap:
    return ConfigMap({"memory_capacity": 10})


@pytest.fixture
def larger_map(small_map) -> ConfigMap:
    return small_map.put("use_motion", False)


def test_constructor_copies_initial_dict():
    initial = {"memory_capacity": 10}
    config_map = ConfigMap(initial)
    assert config_map.raw is not initial
    assert config_map.raw == initial


def test_getitem_found_returns_item(small_map):
    assert small_map["memory_capacity"] == 10


def test_getitem_missing_raises_keyerror(small_map):
    with pytest.raises(KeyError):
        small_map["use_motion"]


def test_get_missing_returns_none(small_map):
    assert small_map.get("use_motion") is None


def test_get_falsey_returns_item(larger_map):
    assert larger_map.get("use_motion") is False


def test_map_cannot_set_new_key(small_map):
    with pytest.raises(TypeError):
        small_map["use_motion"] = True
    with pytest.raises(AttributeError):
        small_map.setitem("use_motion", True)


def test_maps_are_equal_based_on_their_entries(small_map):
    assert small_map == ConfigMap({"memory_capacity": "10"})
    assert small_map == {"memory_capacity": 10}
    assert not small_map == set()


@P.autodetect_parameters()
@P.case(name="empty", fixture="empty_map", expected=0)
@P.case(name="small", fixture="small_map", expected=1)
@P.case(name="larger", fixture="larger_map", expected=2)
def test_map_knows_its_length(fixture, expected, request):
    assert len(request.getfixturevalue(fixture)) == expected


def test_iteration_follows_insertion_order(larger_map):
    assert list(larger_map) == ["memory_capacity", "use_motion"]
    assert list(larger_map.items()) == [("memory_capacity", 10), ("use_motion", False)]


def test_repr(small_map):
    assert repr(small_map) == "ConfigMap({'memory_capacity': 10})"


def test_hash_ignores_insertion_order(larger_map):
    reordered = ConfigMap({"use_motion": False, "memory_capacity": 10})
    assert hash(reordered) == hash(larger_map)
    assert hash(larger_map) != hash(ConfigMap({"memory_capacity": 10}))


def test_empty_map_is_falsy(empty_map, small_map):
    assert not empty_map
    assert small_map


def test_put_does_not_change_original(small_map):
    updated = small_map.put("memory_capacity", 20)
    assert updated is not small_map
    assert small_map["memory_capacity"] == 10
    assert updated["memory_capacity"] == 20


def test_combine_prefers_the_other_map(small_map):
    combined = small_map.combine(ConfigMap({"memory_capacity": 30}))
    assert combined is not small_map
    assert combined == {"memory_capacity": 30}


def test_unknown_keys_are_rejected(small_map):
    with pytest.raises(ConfigError):
        small_map.put("colour", "red")


@P.autodetect_parameters()
@P.case(name="int_from_text", key="memory_capacity", value="12", expected=12)
@P.case(name="int_from_float_text", key="memory_capacity", value="3.0", expected=3)
@P.case(name="float_from_text", key="learning_rate", value=" 0.5 ", expected=0.5)
@P.case(name="bool_word", key="use_motion", value="Off", expected=False)
@P.case(name="bool_digit", key="use_motion", value="1", expected=True)
@P.case(name="tuple_from_text", key="lambdas", value="1, 2", expected=(1.0, 2.0))
@P.case(name="tuple_from_list", key="motion_layers", value=[1, 0], expected=(True, False))
def test_values_are_coerced_to_the_default_type(key, value, expected):
    coerced = ConfigMap({key: value})[key]
    assert coerced == expected
    assert type(coerced) is type(expected)


@P.autodetect_parameters()
@P.case(name="fractional_int", key="memory_capacity", value="3.5")
@P.case(name="word_as_int", key="update_interval", value="often")
@P.case(name="bad_bool", key="use_motion", value="maybe")
@P.case(name="bad_float", key="cg_tol", value="tiny")
def test_unreadable_values_are_rejected(key, value):
    with pytest.raises(ConfigError):
        ConfigMap({key: value})


def test_parse_reads_the_file_format():
    parsed = ConfigMap.parse(SAMPLE)
    assert parsed == {
        "layer_names": ("fine", "coarse"),
        "layer_cell_sizes": (4, 8),
        "memory_capacity": 10,
        "use_motion": False,
    }


@P.autodetect_parameters()
@P.case(name="missing_equals", text="memory_capacity = 3\nuse_motion\n", line=2)
@P.case(name="missing_key", text="= 3\n", line=1)
@P.case(
    name="duplicate",
    text="memory_capacity = 3\n\nmemory_capacity = 4\n",
    line=3,
)
@P.case(
    name="unreadable_value",
    text="memory_capacity = 3\nlearning_rate = abc\n",
    line=2,
)
@P.case(name="unknown_key", text="# comment\n\nstride = 2\n", line=3)
def test_parse_reports_the_bad_line(text, line):
    with pytest.raises(ConfigError, match=f"line {line}"):
        ConfigMap.parse(text)


def test_load_reads_files(tmp_path):
    path = tmp_path / "tracker.cfg"
    path.write_text(SAMPLE)
    assert ConfigMap.load(path)["memory_capacity"] == 10
    with pytest.raises(ConfigError):
        ConfigMap.load(tmp_path / "missing.cfg")


def test_defaults_survive_a_round_trip_through_text():
    text = TrackerConfig().to_map().dumps()
    assert TrackerConfig.from_map(ConfigMap.parse(text)) == TrackerConfig()


def test_from_map_overrides_defaults():
    config = TrackerConfig.from_map(ConfigMap.parse("update_interval = 3\n"))
    assert config.update_interval == 3
    assert config.memory_capacity == TrackerConfig().memory_capacity


def test_derived_settings():
    config = TrackerConfig()
    assert [spec.name for spec in config.layer_specs] == ["shallow", "middle", "deep"]
    assert list(config.scale.exponents) == list(range(-5, 6))
    assert config.scale.scale_layer == "middle"
    np.testing.assert_allclose(config.kalman.R, 4.0 * np.eye(2))


@P.autodetect_parameters()
@P.case(name="duplicate_layers", overrides={"layer_names": ("a", "a", "b")})
@P.case(name="short_lambdas", overrides={"lambdas": (1.0, 1.0)})
@P.case(name="zero_lambda", overrides={"lambdas": (1.0, 0.0, 1.0)})
@P.case(name="learning_rate", overrides={"learning_rate": 1.0})
@P.case(name="update_interval", overrides={"update_interval": 0})
@P.case(name="gate", overrides={"confidence_gate": 1.0})
@P.case(name="scale_layer", overrides={"scale_layer": "nope"})
@P.case(name="energy_source", overrides={"energy_source": "all"})
@P.case(name="cg_formula", overrides={"cg_formula": "bogus"})
@P.case(name="motion_kind", overrides={"motion_kind": "square"})
@P.case(name="patch_bounds", overrides={"patch_min": 260})
@P.case(name="huge_cells", overrides={"layer_cell_sizes": (4, 8, 300)})
@P.case(name="scale_alpha", overrides={"scale_alpha": 1.0})
def test_invalid_configs_are_rejected(overrides):
    with pytest.raises(ConfigError):
        TrackerConfig(**overrides)
