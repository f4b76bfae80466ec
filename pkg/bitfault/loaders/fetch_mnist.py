"""
Download the MNIST IDX files
"""
import os
import shutil
import tempfile
import urllib.request

from filefetcher.manager import BuildTask

from ..const import MNIST_FILES


MNIST_URL = 'https://storage.googleapis.com/cvdf-datasets/mnist/'


class FetchMnist(BuildTask):
    """A packaged filefetcher build task that downloads the four (gzipped) MNIST files"""
    def __init__(self, base_url: str = MNIST_URL):
        self.base_url = base_url

    def get_assets(self) -> list:
        # Uses a system temp directory rather than the build folder in case files are needed between runs
        paths = []
        for names in MNIST_FILES.values():
            for name in names:
                dest_fn = os.path.join(tempfile.gettempdir(), name + '.gz')
                if not os.path.exists(dest_fn):
                    urllib.request.urlretrieve(self.base_url + name + '.gz', dest_fn)
                paths.append(dest_fn)
        return paths

    def build(self, manager, item_type: str, build_folder: str, **kwargs):
        dest = os.path.join(build_folder, item_type)
        os.makedirs(dest, exist_ok=True)
        print('Building to: ', dest)
        for path in self.get_assets():
            shutil.copy(path, dest)
        return dest, {'source': self.base_url}
