#!/usr/bin/env python3
"""
Скрипт для быстрого запуска эксперимента на настольном масштабе
"""

import argparse
import os
import shutil
import subprocess
import sys


def run_command(command, description):
    """Выполнение команды manage.py с описанием"""
    print(f"\n{description}...")
    result = subprocess.run([sys.executable, 'manage.py', *command], text=True)
    if result.returncode == 0:
        print(f"✓ {description} - выполнено")
        return True
    print(f"✗ Ошибка при {description.lower()} (код выхода {result.returncode})")
    return False


def main():
    parser = argparse.ArgumentParser(description='Desk-scale run of the domain adaptation pipeline')
    parser.add_argument('--config', default=None, help='JSON experiment config')
    parser.add_argument('--seed', type=int, default=None, help='Master seed override')
    args = parser.parse_args()

    print("=== Запуск пайплайна адаптации домена ===")

    if not os.path.exists('manage.py'):
        print("Ошибка: manage.py не найден. Убедитесь, что вы находитесь в корне проекта.")
        sys.exit(1)

    if not os.path.exists('.env') and os.path.exists('.env.example'):
        print("Создание файла конфигурации...")
        shutil.copyfile('.env.example', '.env')

    if not run_command(['check'], "Проверка конфигурации Django"):
        sys.exit(1)

    options = []
    if args.config:
        options += ['--config', args.config]
    if args.seed is not None:
        options += ['--seed', str(args.seed)]

    if not run_command(['run_all', *options], "Полный прогон пайплайна"):
        print("Отдельные стадии можно перезапустить: gen_data, train_gan, translate, "
              "train_seg, self_train, eval, report")
        sys.exit(1)

    run_command(['report', *options], "Итоговая таблица")
    print("\n=== Готово ===")


if __name__ == "__main__":
    main()
