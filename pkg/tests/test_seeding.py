from lstmtrojan.seeding import child_rng, child_seed


def test_labels_give_independent_stable_streams():
    assert child_seed(7, "eval", 3) == child_seed(7, "eval", 3)
    assert child_seed(7, "eval", 3) != child_seed(7, "eval", 4)
    assert child_seed(7, "eval") != child_seed(8, "eval")
    assert child_seed(7, "grid") != child_seed(7, "eval")
    assert 0 <= child_seed(1, "x") < 2 ** 64
    assert child_rng(3, "a").random() == child_rng(3, "a").random()
