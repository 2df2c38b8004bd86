import json

import numpy as np
import pytest

from adaptlqr.errors import (
    ConfigError,
    NotPositiveDefinite,
    RejectionLimitExceeded,
)
from adaptlqr.matlin import solve_dare
from adaptlqr.plantspace import (
    ZERO,
    EntryClass,
    Fixed,
    Free,
    InfoStructure,
    NoiseModel,
    PlantFamily,
    family_from_json,
    family_to_json,
    known_mask,
    load_family,
    no_knowledge_mask,
    sample_plant,
    save_family,
    whiten,
)
from adaptlqr.platoon import build_platoon, default_instance, platoon_instance


@pytest.fixture(scope="module")
def platoon():
    return build_platoon()


class TestInfoStructure:
    def test_dims(self, platoon):
        info = platoon.info
        assert info.n == 3 and info.m == 2 and info.n_subsystems == 2
        assert info.state_slice(1) == slice(1, 3)
        assert info.input_slice(1) == slice(1, 2)

    def test_design_diag_forced(self):
        info = InfoStructure(
            state_dims=(1, 1),
            input_dims=(1, 1),
            plant_adj=np.ones((2, 2)),
            design_adj=np.zeros((2, 2)),
        )
        assert np.all(np.diag(info.design_adj) == 1)

    def test_no_self_knowledge_escape(self):
        info = InfoStructure(
            state_dims=(1,),
            input_dims=(1,),
            plant_adj=np.ones((1, 1)),
            design_adj=np.zeros((1, 1)),
            allow_no_self_knowledge=True,
        )
        assert info.design_adj[0, 0] == 0


class TestFamilyValidation:
    def test_graph_zero_must_be_zero(self):
        info = InfoStructure(
            state_dims=(1, 1), input_dims=(1, 1),
            plant_adj=np.array([[1, 0], [1, 1]]),
            design_adj=np.eye(2),
        )
        with pytest.raises(ConfigError):
            PlantFamily(
                info=info,
                a_spec=((Free(0, 1), Fixed(1.0)), (Fixed(1.0), Free(0, 1))),
                b_spec=((Free(0.5, 1.5), ZERO), (ZERO, Free(0.5, 1.5))),
                q=np.eye(2), r=np.eye(2),
            )

    def test_bad_interval(self):
        info = InfoStructure(
            state_dims=(1,), input_dims=(1,),
            plant_adj=np.ones((1, 1)), design_adj=np.ones((1, 1)),
        )
        with pytest.raises(ConfigError):
            PlantFamily(
                info=info, a_spec=((Free(1, 1),),), b_spec=((Fixed(1.0),),),
                q=np.eye(1), r=np.eye(1),
            )

    def test_free_entry_order(self, platoon):
        labels = [e[0] for e in platoon.free_entries()]
        assert labels == ["a[0][0]", "a[2][2]", "b[0][0]", "b[2][1]"]


class TestSampling:
    def test_all_fixed_family_unique_plant(self):
        info = InfoStructure(
            state_dims=(1,), input_dims=(1,),
            plant_adj=np.ones((1, 1)), design_adj=np.ones((1, 1)),
        )
        fam = PlantFamily(
            info=info, a_spec=((Fixed(0.5),),), b_spec=((Fixed(1.0),),),
            q=np.eye(1), r=np.eye(1),
        )
        p1 = sample_plant(fam, 1)
        p2 = sample_plant(fam, 999)
        assert p1.a[0, 0] == p2.a[0, 0] == 0.5
        assert p1.b[0, 0] == p2.b[0, 0] == 1.0

    def test_platoon_sampling_in_box_with_sparsity(self, platoon):
        for seed in range(5):
            plant = sample_plant(platoon, seed)
            assert 0.0 <= plant.a[0, 0] <= 1.0
            assert 0.0 <= plant.a[2, 2] <= 1.0
            assert 0.5 <= plant.b[0, 0] <= 1.5
            assert 0.5 <= plant.b[2, 1] <= 1.5
            assert plant.a[0, 1] == plant.a[0, 2] == 0.0
            assert plant.b[0, 1] == plant.b[1, 0] == plant.b[1, 1] == plant.b[2, 0] == 0.0
            # middle row fixed entries
            assert plant.a[1, 0] == 1.0 and plant.a[1, 1] == 1.0 and plant.a[1, 2] == -1.0

    def test_seed_reproducible_bitwise(self, platoon):
        p1 = sample_plant(platoon, 42)
        p2 = sample_plant(platoon, 42)
        assert p1.a.tobytes() == p2.a.tobytes()
        assert p1.b.tobytes() == p2.b.tobytes()

    def test_rejection_limit(self):
        # unstable A with zero B: every draw fails the PBH test
        info = InfoStructure(
            state_dims=(1,), input_dims=(1,),
            plant_adj=np.ones((1, 1)), design_adj=np.ones((1, 1)),
        )
        fam = PlantFamily(
            info=info, a_spec=((Free(2.0, 3.0),),), b_spec=((Fixed(0.0),),),
            q=np.eye(1), r=np.eye(1),
        )
        with pytest.raises(RejectionLimitExceeded):
            sample_plant(fam, 0)


class TestWhiten:
    def test_unit_noise_is_identity(self, platoon):
        plant = default_instance(platoon)
        same = whiten(plant, NoiseModel())
        assert same is plant

    def test_scalar_conjugation_cancels(self):
        # H_i = 4I on scalar subsystems: A unchanged, B halved
        info = InfoStructure(
            state_dims=(1, 1), input_dims=(1, 1),
            plant_adj=np.ones((2, 2)), design_adj=np.eye(2),
        )
        fam = PlantFamily(
            info=info,
            a_spec=((Fixed(0.3), Fixed(0.1)), (Fixed(0.2), Fixed(0.4))),
            b_spec=((Fixed(1.0), Fixed(0.5)), (Fixed(0.2), Fixed(1.0))),
            q=np.eye(2), r=np.eye(2),
        )
        plant = fam.make_plant(np.empty(0))
        noise = NoiseModel(covariances=(np.array([[4.0]]), np.array([[4.0]])))
        bar = whiten(plant, noise)
        assert np.abs(bar.a - plant.a).max() < 1e-12
        assert np.abs(bar.b - plant.b / 2.0).max() < 1e-12

    def test_round_trip(self, platoon):
        plant = default_instance(platoon)
        noise = NoiseModel(
            covariances=(np.array([[2.0]]), np.diag([3.0, 0.5]))
        )
        inverse = NoiseModel(
            covariances=tuple(np.linalg.inv(h) for h in noise.covariances)
        )
        back = whiten(whiten(plant, noise), inverse)
        assert np.abs(back.a - plant.a).max() < 1e-12
        assert np.abs(back.b - plant.b).max() < 1e-12
        assert np.abs(back.q - plant.q).max() < 1e-12

    def test_optimal_cost_preserved(self, platoon):
        # optimal cost with covariance H equals trace(X Hfull); whitening
        # maps it onto the plain trace of the transformed solution
        plant = default_instance(platoon)
        noise = NoiseModel(
            covariances=(np.array([[1.7]]), np.array([[2.0, 0.3], [0.3, 0.9]]))
        )
        h_full = np.zeros((3, 3))
        h_full[0, 0] = 1.7
        h_full[1:, 1:] = [[2.0, 0.3], [0.3, 0.9]]
        x = solve_dare(plant.a, plant.b, plant.q, plant.r).x
        bar = whiten(plant, noise)
        x_bar = solve_dare(bar.a, bar.b, bar.q, bar.r).x
        assert abs(np.trace(x_bar) - np.trace(x @ h_full)) < 1e-8

    def test_not_pd_rejected(self, platoon):
        plant = default_instance(platoon)
        bad = NoiseModel(covariances=(np.array([[0.0]]), np.eye(2)))
        with pytest.raises(NotPositiveDefinite):
            whiten(plant, bad)


class TestKnownMask:
    def test_platoon_subsystem_masks(self, platoon):
        m0 = known_mask(platoon, 0)
        # subsystem 0 knows row-block 0 (its own a11, b11); it must estimate
        # (a22, b22); the fixed middle row is universally known
        assert m0[0, 0] == EntryClass.KNOWN  # a11
        assert m0[0, 3] == EntryClass.KNOWN  # b11
        assert m0[2, 2] == EntryClass.FREE   # a22
        assert m0[2, 4] == EntryClass.FREE   # b22
        assert m0[1, 0] == EntryClass.KNOWN  # fixed 1
        assert m0[0, 1] == EntryClass.ZERO

        m1 = known_mask(platoon, 1)
        assert m1[0, 0] == EntryClass.FREE   # a11 unknown to subsystem 1
        assert m1[0, 3] == EntryClass.FREE
        assert m1[2, 2] == EntryClass.KNOWN
        assert m1[2, 4] == EntryClass.KNOWN

    def test_full_design_graph_everything_known(self, platoon):
        info = InfoStructure(
            state_dims=platoon.info.state_dims,
            input_dims=platoon.info.input_dims,
            plant_adj=platoon.info.plant_adj,
            design_adj=np.ones((2, 2)),
        )
        fam = PlantFamily(
            info=info, a_spec=platoon.a_spec, b_spec=platoon.b_spec,
            q=platoon.q, r=platoon.r,
        )
        mask = known_mask(fam, 0)
        assert not np.any(mask == EntryClass.FREE)

    def test_partition_no_overlap(self, platoon):
        for i in range(2):
            mask = known_mask(platoon, i)
            counts = {
                cls: int(np.sum(mask == cls))
                for cls in (EntryClass.KNOWN, EntryClass.FREE, EntryClass.ZERO)
            }
            assert sum(counts.values()) == mask.size

    def test_single_subsystem_everything_known(self):
        info = InfoStructure(
            state_dims=(1,), input_dims=(1,),
            plant_adj=np.ones((1, 1)), design_adj=np.eye(1),
        )
        fam = PlantFamily(
            info=info, a_spec=((Free(0, 1),),), b_spec=((Free(0.5, 1.5),),),
            q=np.eye(1), r=np.eye(1),
        )
        assert not np.any(known_mask(fam, 0) == EntryClass.FREE)

    def test_no_knowledge_mask(self, platoon):
        mask = no_knowledge_mask(platoon)
        assert int(np.sum(mask == EntryClass.FREE)) == 4

    def test_out_of_range(self, platoon):
        with pytest.raises(IndexError):
            known_mask(platoon, 2)


class TestJsonRoundTrip:
    def test_round_trip(self, tmp_path, platoon):
        path = tmp_path / "fam.json"
        save_family(platoon, path)
        loaded = load_family(path)
        assert loaded.info.state_dims == platoon.info.state_dims
        assert loaded.a_spec == platoon.a_spec
        assert loaded.b_spec == platoon.b_spec
        assert np.array_equal(loaded.q, platoon.q)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_family(tmp_path / "missing.json")

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            load_family(p)

    def test_missing_key(self):
        with pytest.raises(ConfigError):
            family_from_json({"state_dims": [1]})

    def test_docs_match_schema(self, platoon):
        doc = family_to_json(platoon)
        assert doc["a"][0][0] == {"free": [0.0, 1.0]}
        assert doc["a"][0][1] == "zero"
        assert doc["a"][1][0] == {"fixed": 1.0}
        json.dumps(doc)  # serializable


class TestPlatoonBuilder:
    def test_paper_default_instance(self, platoon):
        plant = default_instance(platoon)
        assert plant.a[0, 0] == 0.4360
        assert plant.b[0, 0] == 1.0497
        assert plant.a[2, 2] == 0.0259
        assert plant.b[2, 1] == 0.9353

    def test_zero_drag_gives_integrator(self):
        from adaptlqr.platoon import PlatoonParams, params_instance

        params = PlatoonParams(alpha=(0.0, 0.0), beta=(1.0, 1.0))
        plant = params_instance(params)
        assert plant.a[0, 0] == 1.0 and plant.a[2, 2] == 1.0

    def test_params_out_of_box_rejected(self):
        from adaptlqr.platoon import PlatoonParams, params_instance

        params = PlatoonParams(alpha=(3.0, 0.5), beta=(1.0, 1.0))
        with pytest.raises(ConfigError):
            params_instance(params)

    def test_bad_params(self):
        from adaptlqr.platoon import PlatoonParams

        with pytest.raises(ConfigError):
            PlatoonParams(mass=(0.0, 1.0))
        with pytest.raises(ConfigError):
            PlatoonParams(delta_t=0.0)
