from ozone_bias.utils import flatten_dict


def test_flatten_nested_dict():
    d = {"overall": {"winner": "unet", "margin": 1.5}, "labels": ["rf", "unet"]}
    assert flatten_dict(d) == {"overall/winner": "unet", "overall/margin": 1.5, "labels": ["rf", "unet"]}
    assert flatten_dict(d, sep=".") == {"overall.winner": "unet", "overall.margin": 1.5, "labels": ["rf", "unet"]}


def test_flatten_non_string_keys():
    assert flatten_dict({2016: {6: 3}}, parent_key="days") == {"days/2016/6": 3}
