from cafbifpn.io.config import RunConfig, config_from_dict, config_parse
from cafbifpn.io.tensorfile import tensor_from_bytes, tensor_read, tensor_to_bytes, tensor_write
from cafbifpn.io.padding import crop_to, pad_to_multiple
from cafbifpn.io.fixtures import FIXTURE_DIMS, FixtureManifest, fixture_tensors, gen_fixture, load_backbone
