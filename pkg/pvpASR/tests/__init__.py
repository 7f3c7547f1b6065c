from . import (test_acceptance, test_attacks, test_cli, test_data_io,
               test_detector, test_metrics, test_model, test_pipeline,
               test_precision, test_psychoacoustics, test_tensor, test_utils)


def load_tests(loader, suite, pattern):
    suite.addTests(loader.loadTestsFromModule(test_precision))
    suite.addTests(loader.loadTestsFromModule(test_tensor))
    suite.addTests(loader.loadTestsFromModule(test_metrics))
    suite.addTests(loader.loadTestsFromModule(test_model))
    suite.addTests(loader.loadTestsFromModule(test_psychoacoustics))
    suite.addTests(loader.loadTestsFromModule(test_data_io))
    suite.addTests(loader.loadTestsFromModule(test_detector))
    suite.addTests(loader.loadTestsFromModule(test_attacks))
    suite.addTests(loader.loadTestsFromModule(test_pipeline))
    suite.addTests(loader.loadTestsFromModule(test_utils))
    suite.addTests(loader.loadTestsFromModule(test_cli))
    suite.addTests(loader.loadTestsFromModule(test_acceptance))
    return suite
