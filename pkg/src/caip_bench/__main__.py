import sys
from caip_bench.cli import main
sys.exit(main())
