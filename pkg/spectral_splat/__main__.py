import sys

from spectral_splat.main import main

sys.exit(main())
