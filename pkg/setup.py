from setuptools import setup, find_packages

exec(open('ivector_gan_pytorch/version.py').read())

setup(
  name = 'ivector-gan-pytorch',
  packages = find_packages(exclude = ['tests']),
  version = __version__,
  license='MIT',
  description = 'Short Utterance I-Vector Compensation with a Conditional Wasserstein GAN - Pytorch',
  long_description_content_type = 'text/markdown',
  keywords = [
    'artificial intelligence',
    'generative adversarial networks',
    'speaker verification'
  ],
  install_requires=[
    'einops',
    'numpy',
    'torch',
    'tqdm'
  ],
  extras_require = {
    'test': ['pytest']
  },
  entry_points = {
    'console_scripts': [
      'ivector-gan = ivector_gan_pytorch.cli:cli'
    ]
  },
  classifiers=[
    'Development Status :: 4 - Beta',
    'Intended Audience :: Developers',
    'Topic :: Scientific/Engineering :: Artificial Intelligence',
    'License :: OSI Approved :: MIT License',
    'Programming Language :: Python :: 3.8',
  ],
)
