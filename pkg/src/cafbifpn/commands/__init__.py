from cafbifpn.commands.selfcheck import PROPERTIES, PropertyResult, cmd_selfcheck
from cafbifpn.commands.forward import ForwardReport, LevelStats, cmd_forward, run_forward
from cafbifpn.commands.gradcheck import GROUPS, GradcheckReport, check_coordinate, check_group, cmd_gradcheck
from cafbifpn.commands.bench import BenchReport, cmd_bench, default_sweep
from cafbifpn.io.fixtures import gen_fixture as cmd_gen_fixture
