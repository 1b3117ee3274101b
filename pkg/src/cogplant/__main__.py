from cogplant.cli import main

raise SystemExit(main())
