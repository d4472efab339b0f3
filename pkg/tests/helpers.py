import numpy as np

from persrep.dataset import ImageRecord, InstanceDataset, InstanceEntry


def random_record(rng, rid="img", iid="a", split="train", size=(32, 32), with_mask=True, scene=None):
    px = rng.integers(0, 256, size=size + (3,), dtype=np.uint8)
    mask = None
    if with_mask:
        mask = np.zeros(size, dtype=bool)
        r0, c0 = rng.integers(0, size[0] // 2), rng.integers(0, size[1] // 2)
        mask[r0:r0 + rng.integers(1, size[0] // 2 + 1), c0:c0 + rng.integers(1, size[1] // 2 + 1)] = True
    return ImageRecord(rid, px, iid, split, scene, mask)


def tiny_dataset(rng, n_instances=2, n_test=3, size=(32, 32)):
    inst = {}
    for i in range(n_instances):
        iid = f"inst{i}"
        train = tuple(random_record(rng, f"tr{j}", iid, "train", size) for j in range(3))
        test = tuple(random_record(rng, f"te{j}", iid, "test", size) for j in range(n_test))
        inst[iid] = InstanceEntry("mug", train, test)
    return InstanceDataset(inst)
