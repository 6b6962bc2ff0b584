from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('kind', models.CharField(choices=[('reconstruct', 'Reconstruct'), ('sweep', 'Sweep'), ('counterexample', 'Counterexample'), ('denoise', 'Denoise'), ('verify', 'Verify')], max_length=20)),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('succeeded', 'Succeeded'), ('failed', 'Failed')], default='pending', max_length=20)),
                ('task', models.CharField(blank=True, default='', max_length=20)),
                ('algorithm', models.CharField(blank=True, default='', max_length=20)),
                ('config', models.JSONField(default=dict)),
                ('report', models.JSONField(blank=True, null=True)),
                ('rows', models.JSONField(blank=True, default=list)),
                ('error', models.TextField(blank=True, default='')),
                ('exit_code', models.IntegerField(default=0)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'verbose_name': 'Experiment run',
                'verbose_name_plural': 'Experiment runs',
                'ordering': ['-created_at'],
            },
        ),
    ]
